#include "idd/data_synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace idd::data {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

enum class ShapeKind { kDisk, kRectangle, kTriangle, kRing };

struct Rect {
  double x0, y0, x1, y1;
};

// Preferred centre region per foreground class, in normalised coordinates.
// Classes beyond the table cycle through it.
constexpr std::array<Rect, 5> kCentreBias = {{
    {0.20, 0.15, 0.80, 0.45},  // upper band
    {0.15, 0.20, 0.45, 0.80},  // left band
    {0.20, 0.55, 0.80, 0.85},  // lower band
    {0.55, 0.20, 0.85, 0.80},  // right band
    {0.30, 0.30, 0.70, 0.70},  // centre
}};

constexpr double kMinRadius = 0.12;  // fraction of min(H, W)
constexpr double kMaxRadius = 0.20;
constexpr double kTextureAmplitude = 0.35;
constexpr double kPixelNoise = 0.06;

ShapeKind kind_for_class(int cls) { return static_cast<ShapeKind>((cls - 1) % 4); }

double texture_angle(int cls, int num_classes) {
  return std::numbers::pi * (cls - 1) / std::max(1, num_classes - 1);
}

struct Placed {
  ShapeKind kind;
  double cx, cy, r;
  double angle;
  double half_a, half_b;  // rectangle half extents
};

bool inside(const Placed& s, double x, double y) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  switch (s.kind) {
    case ShapeKind::kDisk:
      return dx * dx + dy * dy <= s.r * s.r;
    case ShapeKind::kRing: {
      const double d2 = dx * dx + dy * dy;
      const double inner = 0.55 * s.r;
      return d2 <= s.r * s.r && d2 >= inner * inner;
    }
    case ShapeKind::kRectangle: {
      const double c = std::cos(s.angle), sn = std::sin(s.angle);
      const double u = c * dx + sn * dy;
      const double v = -sn * dx + c * dy;
      return std::abs(u) <= s.half_a && std::abs(v) <= s.half_b;
    }
    case ShapeKind::kTriangle: {
      // Equilateral triangle with circumradius r.
      std::array<double, 3> px{}, py{};
      for (int k = 0; k < 3; ++k) {
        const double a = s.angle + 2.0 * std::numbers::pi * k / 3.0;
        px[k] = s.r * std::cos(a);
        py[k] = s.r * std::sin(a);
      }
      bool neg = false, pos = false;
      for (int k = 0; k < 3; ++k) {
        const int j = (k + 1) % 3;
        const double cross = (px[j] - px[k]) * (dy - py[k]) - (py[j] - py[k]) * (dx - px[k]);
        neg |= cross < 0;
        pos |= cross > 0;
      }
      return !(neg && pos);
    }
  }
  return false;
}

}  // namespace

void DatasetSpec::validate() const {
  if (num_classes < 2) {
    throw std::invalid_argument("DatasetSpec: num_classes must be >= 2 (got " +
                                std::to_string(num_classes) + ")");
  }
  if (num_classes >= kIgnoreLabel) {
    throw std::invalid_argument("DatasetSpec: num_classes must be < 255 (got " +
                                std::to_string(num_classes) + ")");
  }
  if (height < 16 || width < 16) {
    throw std::invalid_argument("DatasetSpec: height and width must be >= 16 (got " +
                                std::to_string(height) + "x" + std::to_string(width) + ")");
  }
  if (train_count < 0 || val_count < 0) {
    throw std::invalid_argument("DatasetSpec: sample counts must be non-negative");
  }
  if (!(ignore_fraction >= 0.0 && ignore_fraction <= 0.1)) {
    throw std::invalid_argument("DatasetSpec: ignore_fraction must lie in [0, 0.1] (got " +
                                std::to_string(ignore_fraction) + ")");
  }
}

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "val"; }

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  throw std::invalid_argument("unknown split '" + name + "' (expected train or val)");
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t sample_id) {
  return splitmix64(splitmix64(dataset_seed) ^ (sample_id * 0xD1B54A32D192ED03ull));
}

Sample generate_sample(const DatasetSpec& spec, std::uint64_t sample_id) {
  spec.validate();
  const int H = spec.height;
  const int W = spec.width;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  std::mt19937_64 rng(sample_seed(spec.seed, sample_id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kPixelNoise);

  Sample s;
  s.sample_id = sample_id;
  s.height = H;
  s.width = W;
  s.image.assign(3 * P, 0.0f);
  s.labels.assign(P, 0);

  // Background: per-image base colour, a weak linear colour ramp and noise.
  std::array<double, 3> base{}, ramp_x{}, ramp_y{};
  for (int ch = 0; ch < 3; ++ch) {
    base[ch] = 0.25 + 0.5 * unit(rng);
    ramp_x[ch] = 0.2 * (unit(rng) - 0.5);
    ramp_y[ch] = 0.2 * (unit(rng) - 0.5);
  }
  std::vector<double> img(3 * P);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double fx = static_cast<double>(x) / W - 0.5;
      const double fy = static_cast<double>(y) / H - 0.5;
      for (int ch = 0; ch < 3; ++ch) {
        img[ch * P + y * W + x] = base[ch] + ramp_x[ch] * fx + ramp_y[ch] * fy;
      }
    }
  }

  const int num_fg = spec.num_classes - 1;
  const double min_side = std::min(H, W);
  const double period = std::max(3.0, min_side / 12.0);
  std::uniform_int_distribution<int> shape_count(1, 4);
  std::uniform_int_distribution<int> class_pick(1, num_fg);
  const int count = shape_count(rng);

  for (int k = 0; k < count; ++k) {
    const int cls = class_pick(rng);
    const Rect& bias = kCentreBias[(cls - 1) % kCentreBias.size()];
    Placed p{};
    p.kind = kind_for_class(cls);
    p.cx = (bias.x0 + (bias.x1 - bias.x0) * unit(rng)) * W;
    p.cy = (bias.y0 + (bias.y1 - bias.y0) * unit(rng)) * H;
    p.r = min_side * (kMinRadius + (kMaxRadius - kMinRadius) * unit(rng));
    p.angle = 2.0 * std::numbers::pi * unit(rng);
    p.half_a = p.r * (0.6 + 0.4 * unit(rng));
    p.half_b = p.r * (0.6 + 0.4 * unit(rng));

    // Fill colour is per instance and independent of the class; the class is
    // carried by geometry and stripe orientation.
    std::array<double, 3> colour{};
    for (int ch = 0; ch < 3; ++ch) colour[ch] = 0.15 + 0.8 * unit(rng);
    const double theta = texture_angle(cls, spec.num_classes);
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    const double ct = std::cos(theta), st = std::sin(theta);

    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (!inside(p, x + 0.5, y + 0.5)) continue;
        const double proj = ct * x + st * y;
        const double stripe = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * proj / period + phase);
        const double mod = 1.0 - kTextureAmplitude + kTextureAmplitude * 2.0 * stripe;
        for (int ch = 0; ch < 3; ++ch) img[ch * P + y * W + x] = colour[ch] * mod;
        s.labels[y * W + x] = static_cast<std::uint8_t>(cls);
      }
    }
  }

  for (std::size_t i = 0; i < img.size(); ++i) {
    s.image[i] = static_cast<float>(std::clamp(img[i] + noise(rng), 0.0, 1.0));
  }

  if (spec.ignore_fraction > 0.0) {
    std::vector<std::size_t> border;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const std::uint8_t v = s.labels[y * W + x];
        const bool edge = (x > 0 && s.labels[y * W + x - 1] != v) ||
                          (x + 1 < W && s.labels[y * W + x + 1] != v) ||
                          (y > 0 && s.labels[(y - 1) * W + x] != v) ||
                          (y + 1 < H && s.labels[(y + 1) * W + x] != v);
        if (edge) border.push_back(static_cast<std::size_t>(y) * W + x);
      }
    }
    std::shuffle(border.begin(), border.end(), rng);
    const auto budget = static_cast<std::size_t>(std::llround(spec.ignore_fraction * static_cast<double>(P)));
    const std::size_t take = std::min(budget, border.size());
    for (std::size_t i = 0; i < take; ++i) s.labels[border[i]] = kIgnoreLabel;
  }
  return s;
}

std::vector<Sample> generate_dataset(const DatasetSpec& spec, Split split) {
  spec.validate();
  const std::uint64_t first = split == Split::kTrain ? 0 : static_cast<std::uint64_t>(spec.train_count);
  const int count = split == Split::kTrain ? spec.train_count : spec.val_count;
  std::vector<Sample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(generate_sample(spec, first + i));
  return out;
}

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  const Sample& first = samples[indices[0]];
  const int H = first.height;
  const int W = first.width;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  Batch b{Tensor<float>(static_cast<int>(indices.size()), 3, H, W),
          LabelMap(static_cast<int>(indices.size()), H, W)};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = samples[indices[i]];
    if (s.height != H || s.width != W) throw std::invalid_argument("make_batch: mixed sample sizes");
    std::copy(s.image.begin(), s.image.end(), b.images.sample(static_cast<int>(i)));
    std::copy(s.labels.begin(), s.labels.end(), b.labels.data.begin() + i * P);
  }
  return b;
}

Batch make_batch(std::span<const Sample> samples) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(samples, idx);
}

}  // namespace idd::data
