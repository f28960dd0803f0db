#include "idd/tensor.hpp"

namespace idd {

std::string to_string(const Shape4& s) {
  return "[" + std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
         std::to_string(s.w) + "]";
}

void LabelMap::validate(int num_classes) const {
  if (data.size() != static_cast<std::size_t>(n) * h * w) {
    throw std::invalid_argument("LabelMap: payload size does not match extents");
  }
  for (std::uint8_t v : data) {
    if (v != kIgnoreLabel && v >= num_classes) {
      throw std::invalid_argument("LabelMap: label " + std::to_string(v) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
}

}  // namespace idd
