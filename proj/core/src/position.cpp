#include "idd/position.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace idd::position {

template <typename T>
Tensor<T> make_coordinate_targets(int height, int width, int batch, bool unit_scale) {
  if (height < 1 || width < 1 || batch < 1) {
    throw std::invalid_argument("make_coordinate_targets: dimensions must be positive (got " +
                                std::to_string(height) + "x" + std::to_string(width) + ")");
  }
  Tensor<T> m(batch, 2, height, width);
  const double sx = unit_scale ? 1.0 / width : 1.0;
  const double sy = unit_scale ? 1.0 / height : 1.0;
  for (int n = 0; n < batch; ++n) {
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        m.at(n, kHorizontal, i, j) = static_cast<T>((j + 1) * sx);
        m.at(n, kVertical, i, j) = static_cast<T>((i + 1) * sy);
      }
    }
  }
  return m;
}

// ---------------------------------------------------------- PositionHead ----

template <typename T>
PositionHead<T>::PositionHead(int in_channels, int hidden, std::uint64_t seed)
    : in_channels_(in_channels), hidden_(hidden), seed_(seed), net_(std::make_unique<nn::Sequential<T>>()) {
  if (in_channels <= 0 || hidden <= 0) throw std::invalid_argument("PositionHead: invalid widths");
  std::mt19937_64 rng(seed);
  auto c1 = std::make_unique<nn::Conv2d<T>>(in_channels, hidden, nn::ConvOptions{}, "pos.conv1");
  auto c2 = std::make_unique<nn::Conv2d<T>>(hidden, 2, nn::ConvOptions{}, "pos.conv2");
  c1->init(rng);
  c2->init(rng);
  net_->add(std::move(c1));
  net_->add(std::make_unique<nn::Relu<T>>());
  net_->add(std::move(c2));
  net_->collect_params(params_);
}

template <typename T>
Tensor<T> PositionHead<T>::forward(const Tensor<T>& features, bool cache) {
  if (features.c() != in_channels_) {
    throw std::invalid_argument("PositionHead: expected " + std::to_string(in_channels_) +
                                " feature channels, got " + std::to_string(features.c()));
  }
  return net_->forward(features, cache && !frozen_);
}

template <typename T>
Tensor<T> PositionHead<T>::backward(const Tensor<T>& grad_masks) {
  return net_->backward(grad_masks);
}

template <typename T>
void PositionHead<T>::zero_grad() {
  for (auto* p : params_) p->grad.fill(T(0));
}

template <typename T>
void PositionHead<T>::freeze() {
  frozen_ = true;
  for (auto* p : params_) p->frozen = true;
}

template <typename T>
std::vector<T> PositionHead<T>::flat_params() const {
  std::vector<T> flat;
  for (const auto* p : params_) flat.insert(flat.end(), p->value.data(), p->value.data() + p->size());
  return flat;
}

template <typename T>
void PositionHead<T>::set_flat_params(std::span<const T> flat) {
  if (flat.size() != param_count().total()) {
    throw std::invalid_argument("PositionHead::set_flat_params: size mismatch");
  }
  std::size_t off = 0;
  for (auto* p : params_) {
    std::copy(flat.begin() + off, flat.begin() + off + p->size(), p->value.data());
    off += p->size();
  }
}

// ------------------------------------------------------------- L_pi ----

namespace {

// Accumulates one row/column term and its gradient. t and s are strided
// views of length len.
template <typename T>
double unit_vector_distance(const T* t, const T* s, int len, std::ptrdiff_t stride, double eps,
                            double scale, T* grad, PiLossInfo* info) {
  double nt = 0.0, ns = 0.0;
  for (int k = 0; k < len; ++k) {
    nt += static_cast<double>(t[k * stride]) * t[k * stride];
    ns += static_cast<double>(s[k * stride]) * s[k * stride];
  }
  nt = std::sqrt(nt);
  ns = std::sqrt(ns);
  if (info && (nt == 0.0 || ns == 0.0)) ++info->zero_vectors;
  double dist2 = 0.0;
  for (int k = 0; k < len; ++k) {
    const double d = t[k * stride] / (nt + eps) - s[k * stride] / (ns + eps);
    dist2 += d * d;
  }
  const double dist = std::sqrt(dist2);
  if (grad && dist > 0.0) {
    // g = d dist / d ŝ = (ŝ − t̂)/dist; then through ŝ = s/(‖s‖+ε).
    double s_dot_g = 0.0;
    std::vector<double> g(len);
    for (int k = 0; k < len; ++k) {
      g[k] = (s[k * stride] / (ns + eps) - t[k * stride] / (nt + eps)) / dist;
      s_dot_g += s[k * stride] * g[k];
    }
    const double inv = 1.0 / (ns + eps);
    const double radial = ns > 0.0 ? s_dot_g / (ns * (ns + eps) * (ns + eps)) : 0.0;
    for (int k = 0; k < len; ++k) {
      grad[k * stride] += static_cast<T>(scale * (g[k] * inv - s[k * stride] * radial));
    }
  }
  return dist;
}

}  // namespace

template <typename T>
double position_info_loss(const Tensor<T>& teacher_masks, const Tensor<T>& student_masks, double epsilon,
                          Tensor<T>* grad_student, PiLossInfo* info) {
  if (teacher_masks.shape() != student_masks.shape() || teacher_masks.c() != 2) {
    throw std::invalid_argument("position_info_loss: mask shapes " + to_string(teacher_masks.shape()) +
                                " and " + to_string(student_masks.shape()) + " must match with 2 channels");
  }
  const int B = teacher_masks.n();
  const int H = teacher_masks.h();
  const int W = teacher_masks.w();
  if (grad_student) *grad_student = Tensor<T>(student_masks.shape());
  if (info) *info = PiLossInfo{};
  const double scale = 0.5 / B;
  double total = 0.0;
  for (int n = 0; n < B; ++n) {
    double hor = 0.0, ver = 0.0;
    for (int i = 0; i < H; ++i) {
      const T* t = teacher_masks.plane(n, kHorizontal) + static_cast<std::size_t>(i) * W;
      const T* s = student_masks.plane(n, kHorizontal) + static_cast<std::size_t>(i) * W;
      T* g = grad_student ? grad_student->plane(n, kHorizontal) + static_cast<std::size_t>(i) * W : nullptr;
      hor += unit_vector_distance(t, s, W, 1, epsilon, scale, g, info);
    }
    for (int j = 0; j < W; ++j) {
      const T* t = teacher_masks.plane(n, kVertical) + j;
      const T* s = student_masks.plane(n, kVertical) + j;
      T* g = grad_student ? grad_student->plane(n, kVertical) + j : nullptr;
      ver += unit_vector_distance(t, s, H, W, epsilon, scale, g, info);
    }
    total += 0.5 * hor + 0.5 * ver;
  }
  return total / B;
}

template <typename T>
double mean_pearson(const Tensor<T>& predicted, const Tensor<T>& target) {
  if (predicted.shape() != target.shape()) throw std::invalid_argument("mean_pearson: shape mismatch");
  const std::size_t P = predicted.shape().plane();
  double acc = 0.0;
  int count = 0;
  for (int n = 0; n < predicted.n(); ++n) {
    for (int c = 0; c < predicted.c(); ++c) {
      const T* a = predicted.plane(n, c);
      const T* b = target.plane(n, c);
      double ma = 0, mb = 0;
      for (std::size_t p = 0; p < P; ++p) {
        ma += a[p];
        mb += b[p];
      }
      ma /= P;
      mb /= P;
      double sab = 0, saa = 0, sbb = 0;
      for (std::size_t p = 0; p < P; ++p) {
        sab += (a[p] - ma) * (b[p] - mb);
        saa += (a[p] - ma) * (a[p] - ma);
        sbb += (b[p] - mb) * (b[p] - mb);
      }
      acc += (saa > 0 && sbb > 0) ? sab / std::sqrt(saa * sbb) : 0.0;
      ++count;
    }
  }
  return count ? acc / count : 0.0;
}

// ------------------------------------------------------------ pretraining ----

double position_head_mse(models::Model<float>& source, PositionHead<float>& head,
                         std::span<const data::Sample> samples, double* correlation) {
  if (samples.empty()) throw std::invalid_argument("position_head_mse: no samples");
  double sq = 0.0, corr = 0.0;
  std::size_t elems = 0;
  int batches = 0;
  constexpr std::size_t kChunk = 8;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const auto chunk = samples.subspan(start, std::min(kChunk, samples.size() - start));
    const auto batch = data::make_batch(chunk);
    const auto feats = source.forward(batch.images, false).features;
    const auto pred = head.forward(feats, false);
    const auto target = make_coordinate_targets<float>(pred.h(), pred.w(), pred.n(), true);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = static_cast<double>(pred.data()[i]) - target.data()[i];
      sq += d * d;
    }
    elems += pred.size();
    corr += mean_pearson(pred, target) * static_cast<double>(chunk.size());
    ++batches;
  }
  if (correlation) *correlation = corr / static_cast<double>(samples.size());
  return sq / static_cast<double>(elems);
}

PretrainResult pretrain_position_head(models::Model<float>& source, std::span<const data::Sample> train,
                                      std::span<const data::Sample> val, const PretrainConfig& config,
                                      const std::function<void(int, double)>& on_step) {
  if (!source.frozen()) {
    throw std::invalid_argument("pretrain_position_head: the feature source must be frozen");
  }
  if (train.empty() || val.empty()) throw std::invalid_argument("pretrain_position_head: empty dataset");
  if (config.iters < 0 || config.batch_size <= 0 || config.grad_clip < 0.0) {
    throw std::invalid_argument("pretrain_position_head: invalid iteration/batch settings");
  }
  PositionHead<float> head(source.spec().feature_dim, config.hidden, config.seed);
  const auto held_out = val.subspan(0, std::min<std::size_t>(val.size(), config.eval_samples));

  PretrainResult result{std::move(head), 0.0, 0.0, 0.0, {}};
  result.initial_val_mse = position_head_mse(source, result.head, held_out);

  nn::Sgd<float> opt(result.head.params(), config.momentum, config.weight_decay);
  std::mt19937_64 rng(config.seed ^ 0x5DEECE66Dull);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  std::vector<std::size_t> idx(config.batch_size);
  for (int it = 0; it < config.iters; ++it) {
    for (auto& i : idx) i = pick(rng);
    const auto batch = data::make_batch(train, idx);
    const auto feats = source.forward(batch.images, false).features;
    const auto pred = result.head.forward(feats, true);
    const auto target = make_coordinate_targets<float>(pred.h(), pred.w(), pred.n(), true);
    Tensor<float> grad(pred.shape());
    double sq = 0.0;
    const double inv = 1.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = static_cast<double>(pred.data()[i]) - target.data()[i];
      sq += d * d;
      grad.data()[i] = static_cast<float>(2.0 * d * inv);
    }
    const double loss = sq * inv;
    if (!std::isfinite(loss)) throw std::runtime_error("pretrain_position_head: non-finite loss at iteration " + std::to_string(it));
    opt.zero_grad();
    result.head.backward(grad);
    nn::clip_grad_norm<float>(result.head.params(), config.grad_clip);
    const double lr = config.lr * std::pow(1.0 - static_cast<double>(it) / config.iters, 0.9);
    opt.step(lr);
    result.train_loss.push_back(loss);
    if (on_step) on_step(it, loss);
  }
  result.final_val_mse = position_head_mse(source, result.head, held_out, &result.val_correlation);
  result.head.freeze();
  return result;
}

#define IDD_INSTANTIATE(T)                                                                   \
  template Tensor<T> make_coordinate_targets<T>(int, int, int, bool);                        \
  template class PositionHead<T>;                                                            \
  template double position_info_loss(const Tensor<T>&, const Tensor<T>&, double, Tensor<T>*, \
                                     PiLossInfo*);                                           \
  template double mean_pearson(const Tensor<T>&, const Tensor<T>&);

IDD_INSTANTIATE(float)
IDD_INSTANTIATE(double)

#undef IDD_INSTANTIATE

}  // namespace idd::position
