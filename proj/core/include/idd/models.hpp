#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idd/nn.hpp"
#include "idd/tensor.hpp"

namespace idd::models {

enum class Role { kTeacher, kStudent };

std::string to_string(Role role);
Role role_from_string(const std::string& name);

/// Architecture description. Block i is a 3×3 conv + ReLU producing
/// channel_widths[i] channels; the first two blocks have stride 2, blocks
/// from index 4 on use dilation 2. With pyramid_pooling a context block and a
/// 3×3 fuse conv follow. The last width is the exposed feature dimension.
struct ModelSpec {
  Role role = Role::kStudent;
  std::vector<int> channel_widths;
  int num_classes = 6;
  int feature_dim = 0;
  bool pyramid_pooling = false;

  static ModelSpec default_teacher(int num_classes);
  static ModelSpec default_student(int num_classes);

  void validate() const;
  int downsample_factor() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

template <typename T>
struct ForwardOutput {
  Tensor<T> features;  // B×C×H×W, pre-logit, label resolution
  Tensor<T> logits;    // B×N×H×W
};

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t total() const { return trainable + frozen; }
};

template <typename T>
ParamCount count_params(std::span<nn::Param<T>* const> params);

/// Segmentation network: strided conv backbone, optional pyramid pooling,
/// bilinear upsampling of the feature map to input resolution and a 1×1
/// classifier at full resolution.
template <typename T>
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t init_seed);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t init_seed() const { return init_seed_; }

  /// images: B×3×H×W with H, W divisible by spec().downsample_factor().
  ForwardOutput<T> forward(const Tensor<T>& images, bool cache = true);

  /// Backpropagates dL/dfeatures (optional) and dL/dlogits from the last
  /// cached forward, accumulating parameter gradients.
  void backward(const Tensor<T>* grad_features, const Tensor<T>& grad_logits);

  std::vector<nn::Param<T>*> params() { return params_; }
  ParamCount param_count() const { return count_params<T>(params_); }
  void zero_grad();

  void freeze();
  bool frozen() const { return frozen_; }

  std::vector<T> flat_params() const;
  void set_flat_params(std::span<const T> flat);

 private:
  ModelSpec spec_;
  std::uint64_t init_seed_;
  std::unique_ptr<nn::Sequential<T>> backbone_;
  std::unique_ptr<nn::Conv2d<T>> classifier_;
  std::vector<nn::Param<T>*> params_;
  bool frozen_ = false;
  int low_h_ = 0;
  int low_w_ = 0;
};

/// Copy of a model's parameters in a new instance.
template <typename T>
Model<T> clone(const Model<T>& m);

/// Order-sensitive FNV-1a hash over parameter bytes.
template <typename T>
std::uint64_t param_hash(const Model<T>& m);

}  // namespace idd::models
