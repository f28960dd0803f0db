#pragma once

// Minimal layer library with hand-written backward passes. Layers cache what
// they need for backward only when forward runs with cache=true; a forward
// with cache=false is a pure inference call.

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "idd/tensor.hpp"

namespace idd::nn {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  std::size_t size() const { return value.size(); }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool cache) = 0;
  /// Accumulates parameter gradients and returns dL/dx. Requires a preceding
  /// forward with cache=true.
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void collect_params(std::vector<Param<T>*>& /*out*/) {}
};

struct ConvOptions {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int dilation = 1;
  bool bias = true;
};

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, ConvOptions opt, std::string name);

  Tensor<T> forward(const Tensor<T>& x, bool cache) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;

  /// He-normal weights, zero bias.
  void init(std::mt19937_64& rng);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  const ConvOptions& options() const { return opt_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  int output_extent(int in_extent) const {
    return (in_extent + 2 * opt_.padding - opt_.dilation * (opt_.kernel - 1) - 1) / opt_.stride + 1;
  }

 private:
  void im2col(const T* src, int h, int w, int ho, int wo, T* col) const;
  void col2im(const T* col, int h, int w, int ho, int wo, T* dst) const;
  bool is_pointwise() const {
    return opt_.kernel == 1 && opt_.stride == 1 && opt_.padding == 0;
  }

  int in_;
  int out_;
  ConvOptions opt_;
  Param<T> weight_;  // out × in × k × k
  Param<T> bias_;    // out
  Tensor<T> input_;
};

template <typename T>
class Relu final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool cache) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  Tensor<T> output_;
};

/// Bilinear resize with half-pixel centres (align_corners = false).
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w);
template <typename T>
Tensor<T> upsample_bilinear_backward(const Tensor<T>& grad_out, int in_h, int in_w);

/// Adaptive average pooling to bins × bins cells.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int bins);
template <typename T>
Tensor<T> adaptive_avg_pool_backward(const Tensor<T>& grad_out, int in_h, int in_w);

/// Pyramid pooling context block: concatenates the input with upsampled,
/// 1×1-projected average pools at several bin sizes.
template <typename T>
class PyramidPooling final : public Layer<T> {
 public:
  PyramidPooling(int channels, int branch_channels, std::vector<int> bins, const std::string& name);

  Tensor<T> forward(const Tensor<T>& x, bool cache) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;
  void init(std::mt19937_64& rng);

  int output_channels() const { return channels_ + branch_channels_ * static_cast<int>(bins_.size()); }

 private:
  int channels_;
  int branch_channels_;
  std::vector<int> bins_;
  std::vector<std::unique_ptr<Conv2d<T>>> proj_;
  std::vector<Relu<T>> relu_;
  int in_h_ = 0;
  int in_w_ = 0;
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }
  Tensor<T> forward(const Tensor<T>& x, bool cache) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// Scales the gradients of non-frozen params so their joint L2 norm is at most
/// max_norm (no-op for max_norm <= 0). Returns the norm before scaling.
template <typename T>
double clip_grad_norm(std::span<Param<T>* const> params, double max_norm);

/// SGD with momentum and L2 weight decay; v = m·v + (g + wd·w), w -= lr·v.
/// Frozen parameters are skipped.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Param<T>*> params, double momentum, double weight_decay);

  void zero_grad();
  void step(double lr);

  /// Momentum buffers in parameter order, for checkpoint/resume.
  const std::vector<std::vector<T>>& state() const { return velocity_; }
  void set_state(std::vector<std::vector<T>> state);

 private:
  std::vector<Param<T>*> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

}  // namespace idd::nn
