#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "idd/binary_io.hpp"
#include "idd/tensor.hpp"

namespace idd::data {

/// Parameters of the procedural shapes dataset. Identical values yield
/// bit-identical datasets.
struct DatasetSpec {
  int num_classes = 6;  // class 0 is background
  int height = 64;
  int width = 64;
  int train_count = 2000;
  int val_count = 200;
  std::uint64_t seed = 7;
  double ignore_fraction = 0.02;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct Sample {
  std::uint64_t sample_id = 0;
  int height = 0;
  int width = 0;
  std::vector<float> image;           // 3×H×W, values in [0, 1]
  std::vector<std::uint8_t> labels;   // H×W, [0, N) or kIgnoreLabel

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class Split { kTrain, kVal };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

/// Deterministic in (spec, sample_id) only.
Sample generate_sample(const DatasetSpec& spec, std::uint64_t sample_id);

/// Train uses ids [0, train_count), val uses [train_count, train_count + val_count).
std::vector<Sample> generate_dataset(const DatasetSpec& spec, Split split);

/// Per-sample seed; mixes the dataset seed with the sample id.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t sample_id);

// -- container format -------------------------------------------------------

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

struct DatasetFile {
  DatasetSpec spec;
  Split split = Split::kTrain;
  std::vector<Sample> samples;
};

using idd::FormatError;

void save_dataset(const std::filesystem::path& path, const DatasetSpec& spec, Split split,
                  std::span<const Sample> samples);

/// If expected_classes is set and differs from the header, throws FormatError
/// naming both values.
DatasetFile load_dataset(const std::filesystem::path& path,
                         std::optional<int> expected_classes = std::nullopt);

// -- batching ---------------------------------------------------------------

struct Batch {
  Tensor<float> images;  // B×3×H×W
  LabelMap labels;       // B×H×W
};

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices);
Batch make_batch(std::span<const Sample> samples);

}  // namespace idd::data
