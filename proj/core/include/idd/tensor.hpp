#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace idd {

/// Label value excluded from losses, class tokens and metrics.
inline constexpr std::uint8_t kIgnoreLabel = 255;

/// 64-byte aligned storage.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// NCHW extents of a dense tensor.
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

std::string to_string(const Shape4& s);

/// Dense row-major NCHW tensor with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0)) : Tensor(Shape4{n, c, h, w}, fill) {}
  explicit Tensor(Shape4 shape, T fill = T(0)) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw std::invalid_argument("Tensor: negative extent " + to_string(shape));
    }
    data_.assign(shape.size(), fill);
  }

  const Shape4& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  /// Pointer to the H*W plane of channel c of sample n.
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }
  /// Pointer to the C*H*W block of sample n.
  T* sample(int n) { return data_.data() + index(n, 0, 0, 0); }
  const T* sample(int n) const { return data_.data() + index(n, 0, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape4 shape_{};
  AlignedVector<T> data_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  Tensor<To> out(src.shape());
  std::transform(src.data(), src.data() + src.size(), out.data(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

/// Batch of H×W integer class maps; values in [0, N) or kIgnoreLabel.
struct LabelMap {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_, std::uint8_t fill = 0)
      : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::uint8_t& at(int i, int y, int x) { return data[(static_cast<std::size_t>(i) * h + y) * w + x]; }
  std::uint8_t at(int i, int y, int x) const { return data[(static_cast<std::size_t>(i) * h + y) * w + x]; }

  /// Throws std::invalid_argument if any value is outside [0, num_classes) ∪ {IGNORE}.
  void validate(int num_classes) const;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace idd
