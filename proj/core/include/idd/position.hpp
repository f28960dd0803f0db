#pragma once

// Position-information distillation: absolute coordinate masks, a small
// convolutional head regressing them from a feature map, its pretraining on
// a frozen network, and the row/column-normalised position loss
//
//   L_pi = 1/2 · Σ_rows ‖t̂_r − ŝ_r‖₂  +  1/2 · Σ_cols ‖t̂_c − ŝ_c‖₂,
//   x̂ = x / (‖x‖₂ + ε),
//
// taken over rows of the horizontal mask and columns of the vertical mask.
// Mask tensors are B×2×H×W: channel 0 is the horizontal (column-index) mask,
// channel 1 the vertical (row-index) mask.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "idd/data_synth.hpp"
#include "idd/models.hpp"
#include "idd/nn.hpp"
#include "idd/tensor.hpp"

namespace idd::position {

inline constexpr int kHorizontal = 0;
inline constexpr int kVertical = 1;
inline constexpr double kDefaultEpsilon = 1e-12;

/// p_hor[i][j] = j + 1, p_ver[i][j] = i + 1, repeated over the batch. With
/// unit_scale the masks are divided by W and H respectively.
template <typename T>
Tensor<T> make_coordinate_targets(int height, int width, int batch = 1, bool unit_scale = false);

/// conv3×3(C → hidden) → ReLU → conv3×3(hidden → 2), zero padding.
template <typename T>
class PositionHead {
 public:
  PositionHead(int in_channels, int hidden, std::uint64_t seed);
  PositionHead(PositionHead&&) noexcept = default;
  PositionHead& operator=(PositionHead&&) noexcept = default;

  Tensor<T> forward(const Tensor<T>& features, bool cache = true);
  Tensor<T> backward(const Tensor<T>& grad_masks);

  int in_channels() const { return in_channels_; }
  int hidden() const { return hidden_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<nn::Param<T>*> params() { return params_; }
  models::ParamCount param_count() const { return models::count_params<T>(params_); }
  void zero_grad();
  void freeze();
  bool frozen() const { return frozen_; }

  std::vector<T> flat_params() const;
  void set_flat_params(std::span<const T> flat);

 private:
  int in_channels_;
  int hidden_;
  std::uint64_t seed_;
  std::unique_ptr<nn::Sequential<T>> net_;
  std::vector<nn::Param<T>*> params_;
  bool frozen_ = false;
};

struct PiLossInfo {
  int zero_vectors = 0;  // rows/columns with an exactly zero norm
};

/// Mean over the batch of per-image L_pi. Throws on shape mismatch.
template <typename T>
double position_info_loss(const Tensor<T>& teacher_masks, const Tensor<T>& student_masks,
                          double epsilon = kDefaultEpsilon, Tensor<T>* grad_student = nullptr,
                          PiLossInfo* info = nullptr);

/// Per-image, per-mask Pearson correlation between prediction and target,
/// averaged.
template <typename T>
double mean_pearson(const Tensor<T>& predicted, const Tensor<T>& target);

struct PretrainConfig {
  int iters = 800;
  int batch_size = 8;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global gradient norm cap, 0 disables
  int hidden = 16;
  std::uint64_t seed = 11;
  int eval_samples = 64;  // held-out samples used for MSE / correlation
};

struct PretrainResult {
  PositionHead<float> head;
  double initial_val_mse = 0.0;
  double final_val_mse = 0.0;
  double val_correlation = 0.0;
  std::vector<double> train_loss;  // per iteration
};

/// Trains a head by MSE against unit-scaled coordinate targets on features
/// of a frozen source network. Throws std::invalid_argument if the source is
/// not frozen. The returned head is frozen.
PretrainResult pretrain_position_head(models::Model<float>& source,
                                      std::span<const data::Sample> train,
                                      std::span<const data::Sample> val, const PretrainConfig& config,
                                      const std::function<void(int, double)>& on_step = {});

/// Mean squared error of the head's masks against unit-scaled targets.
double position_head_mse(models::Model<float>& source, PositionHead<float>& head,
                         std::span<const data::Sample> samples, double* correlation = nullptr);

}  // namespace idd::position
