#pragma once

// Supervised and distillation loss terms and the composite objective
//
//   total = l_tar + l_skd + λ1·l_cw + λ2·l_id + λ3·l_pi
//
// where l_skd = pixel-wise KL + pair_weight · pair-wise affinity. Every
// function returns its value in double and, when asked, writes the gradient
// with respect to the student-side input. Teacher inputs are constants.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idd/models.hpp"
#include "idd/position.hpp"
#include "idd/tensor.hpp"

namespace idd::kd {

enum class PiReference { kTeacherHead, kAnalytic };

struct LossWeights {
  double lambda1 = 3.0;    // L_cw
  double lambda2 = 0.001;  // L_id
  double lambda3 = 0.01;   // L_pi
  double tau_pixel = 1.0;
  double tau_channel = 4.0;
  double pair_weight = 1.0;  // pair-wise share of L_skd
  int affinity_grid = 8;     // S: pooled node grid is S×S
  double pi_epsilon = position::kDefaultEpsilon;
  PiReference pi_reference = PiReference::kTeacherHead;
  bool enable_skd = false;
  bool enable_cw = false;
  bool enable_id = false;
  bool enable_pi = false;

  void validate() const;
  bool any_enabled() const { return enable_skd || enable_cw || enable_id || enable_pi; }

  /// Named ablation rows: baseline, skd, skd-cw, skd-cw-id, skd-cw-pi, full-idd.
  static LossWeights preset(const std::string& name, LossWeights base);
  static LossWeights preset(const std::string& name) { return preset(name, LossWeights{}); }
  static const std::vector<std::string>& preset_names();

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossBreakdown {
  double l_tar = 0.0;
  double l_skd = 0.0;
  double l_cw = 0.0;
  double l_id = 0.0;
  double l_pi = 0.0;
  double total = 0.0;

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

/// Fixed evaluation order: ((((l_tar + l_skd) + λ1·l_cw) + λ2·l_id) + λ3·l_pi).
double weighted_total(const LossBreakdown& b, const LossWeights& w);

void to_json(nlohmann::json& j, const LossBreakdown& b);
void from_json(const nlohmann::json& j, LossBreakdown& b);

/// Mean over non-IGNORE pixels of −log softmax(logits)[label]. Zero valid
/// pixels gives 0 and sets *degenerate.
template <typename T>
double cross_entropy_target_loss(const Tensor<T>& logits, const LabelMap& labels,
                                 Tensor<T>* grad = nullptr, bool* degenerate = nullptr);

/// τ² · mean over pixels of KL(softmax(t/τ) ‖ softmax(s/τ)) over classes.
template <typename T>
double pixelwise_kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, double tau,
                         Tensor<T>* grad = nullptr);

/// Mean squared difference of cosine-similarity matrices between the S×S
/// average-pooled nodes of teacher and student features (per image, then
/// averaged over the batch). Channel counts may differ.
template <typename T>
double pairwise_affinity_loss(const Tensor<T>& teacher_features, const Tensor<T>& student_features,
                              int grid, Tensor<T>* grad = nullptr);

/// τ² · (1/N) Σ_n KL over spatial softmax(·/τ) per channel, averaged over
/// the batch.
template <typename T>
double channelwise_kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, double tau,
                           Tensor<T>* grad = nullptr);

/// Spatial softmax of one channel map at temperature tau (for diagnostics
/// and tests).
template <typename T>
std::vector<double> spatial_softmax(const T* map, std::size_t count, double tau);

template <typename T>
struct PositionHeads {
  position::PositionHead<T>* teacher = nullptr;  // frozen reference head
  position::PositionHead<T>* student = nullptr;  // trained jointly
};

template <typename T>
struct StudentGrads {
  Tensor<T> features;
  Tensor<T> logits;
};

struct LossDiagnostics {
  bool degenerate_batch = false;  // no valid pixel for L_tar
  bool degenerate_graph = false;  // fewer than 2 classes for L_id
  int pi_zero_vectors = 0;
};

/// Evaluates every enabled term. When grads is non-null it receives the
/// gradients w.r.t. the student features and logits, and the student
/// position head accumulates its parameter gradients. Throws
/// std::invalid_argument if enable_pi is set without both heads.
template <typename T>
LossBreakdown total_loss(const models::ForwardOutput<T>& teacher, const models::ForwardOutput<T>& student,
                         const LabelMap& labels, const PositionHeads<T>& heads, const LossWeights& weights,
                         StudentGrads<T>* grads = nullptr, LossDiagnostics* diag = nullptr);

}  // namespace idd::kd
