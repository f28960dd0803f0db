// Dataset container:
//   "IDDS" | u32 version | u32 num_classes | u32 height | u32 width
//   | u32 train_count | u32 val_count | u64 seed | f64 ignore_fraction
//   | u32 split | u64 sample_count
//   | sample_count × ( u64 sample_id | f32[3·H·W] image | u8[H·W] labels )
// All integers and floats little-endian; images and labels row-major.

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "idd/binary_io.hpp"
#include "idd/data_synth.hpp"

namespace idd::data {

namespace {

constexpr std::array<char, 4> kMagic = {'I', 'D', 'D', 'S'};

}  // namespace

void save_dataset(const std::filesystem::path& path, const DatasetSpec& spec, Split split,
                  std::span<const Sample> samples) {
  spec.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  io::Writer w(os);
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kDatasetFormatVersion);
  w.u32(static_cast<std::uint32_t>(spec.num_classes));
  w.u32(static_cast<std::uint32_t>(spec.height));
  w.u32(static_cast<std::uint32_t>(spec.width));
  w.u32(static_cast<std::uint32_t>(spec.train_count));
  w.u32(static_cast<std::uint32_t>(spec.val_count));
  w.u64(spec.seed);
  w.f64(spec.ignore_fraction);
  w.u32(split == Split::kTrain ? 0u : 1u);
  w.u64(samples.size());
  const std::size_t P = static_cast<std::size_t>(spec.height) * spec.width;
  for (const Sample& s : samples) {
    if (s.height != spec.height || s.width != spec.width || s.image.size() != 3 * P ||
        s.labels.size() != P) {
      throw std::invalid_argument("save_dataset: sample " + std::to_string(s.sample_id) +
                                  " does not match the spec's extents");
    }
    w.u64(s.sample_id);
    w.f32_array(s.image);
    w.bytes(s.labels.data(), s.labels.size());
  }
  os.flush();
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

DatasetFile load_dataset(const std::filesystem::path& path, std::optional<int> expected_classes) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  io::Reader r(is, path.string());

  std::array<char, 4> magic{};
  if (!r.try_bytes(magic.data(), magic.size())) {
    throw FormatError(path.string() + ": empty or truncated file (missing IDDS header)");
  }
  if (magic != kMagic) throw FormatError(path.string() + ": bad magic, not an IDDS dataset");
  const std::uint32_t version = r.u32();
  if (version != kDatasetFormatVersion) {
    throw FormatError(path.string() + ": unsupported format version " + std::to_string(version) +
                      " (expected " + std::to_string(kDatasetFormatVersion) + ")");
  }
  DatasetFile f;
  f.spec.num_classes = static_cast<int>(r.u32());
  f.spec.height = static_cast<int>(r.u32());
  f.spec.width = static_cast<int>(r.u32());
  f.spec.train_count = static_cast<int>(r.u32());
  f.spec.val_count = static_cast<int>(r.u32());
  f.spec.seed = r.u64();
  f.spec.ignore_fraction = r.f64();
  const std::uint32_t split = r.u32();
  if (split > 1) throw FormatError(path.string() + ": invalid split code " + std::to_string(split));
  f.split = split == 0 ? Split::kTrain : Split::kVal;
  try {
    f.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": invalid header: " + e.what());
  }
  if (expected_classes && *expected_classes != f.spec.num_classes) {
    throw FormatError(path.string() + ": dataset has num_classes=" +
                      std::to_string(f.spec.num_classes) + " but " +
                      std::to_string(*expected_classes) + " was requested");
  }

  const std::uint64_t count = r.u64();
  const std::size_t P = static_cast<std::size_t>(f.spec.height) * f.spec.width;
  const std::uint64_t expected_max = static_cast<std::uint64_t>(f.spec.train_count) + f.spec.val_count;
  if (count > expected_max) {
    throw FormatError(path.string() + ": sample count " + std::to_string(count) +
                      " exceeds the header's train+val total");
  }
  f.samples.resize(count);
  for (auto& s : f.samples) {
    s.sample_id = r.u64();
    s.height = f.spec.height;
    s.width = f.spec.width;
    s.image = r.f32_array(3 * P);
    s.labels.resize(P);
    r.bytes(s.labels.data(), P);
  }
  char extra;
  if (is.read(&extra, 1); is.gcount() != 0) {
    throw FormatError(path.string() + ": trailing bytes after the last sample");
  }
  return f;
}

}  // namespace idd::data
