#pragma once

// Class tokens (masked feature means), the Euclidean inter-class distance
// graph over them, and the distance-matching loss
//
//   L_id = 1/2 · Σ_i Σ_{j≠i} (e_ij^T − e_ij^S)²
//
// restricted to class pairs present in the labels. Pixels of a whole batch
// are pooled into a single graph.

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "idd/tensor.hpp"

namespace idd::interclass {

template <typename T>
struct ClassTokenSet {
  int num_classes = 0;
  int dim = 0;
  std::vector<std::vector<T>> tokens;        // [class] -> length dim, empty if absent
  std::vector<std::int64_t> pixel_counts;    // [class] -> > 0 iff present

  bool present(int cls) const { return pixel_counts[cls] > 0; }
  std::vector<int> present_classes() const;
  bool empty() const { return present_classes().empty(); }
};

/// features: B×C×H×W, labels: B×H×W. Throws on shape mismatch or invalid
/// labels; all-IGNORE labels give an empty set.
template <typename T>
ClassTokenSet<T> compute_class_tokens(const Tensor<T>& features, const LabelMap& labels,
                                      int num_classes);

/// Scatters dL/dtoken back onto the pixels of each class (1/count each).
template <typename T>
Tensor<T> class_tokens_backward(const std::vector<std::vector<double>>& grad_tokens,
                                const ClassTokenSet<T>& tokens, const LabelMap& labels,
                                const Shape4& feature_shape);

/// Symmetric N×N distance matrix; entries between absent classes hold NaN.
struct DistanceGraph {
  int num_classes = 0;
  std::vector<double> edges;  // row-major N×N
  std::vector<bool> presence;

  bool defined(int i, int j) const { return presence[i] && presence[j]; }
  double edge(int i, int j) const { return edges[static_cast<std::size_t>(i) * num_classes + j]; }
  int present_count() const;
};

template <typename T>
DistanceGraph compute_distance_graph(const ClassTokenSet<T>& tokens, int num_classes);

struct IdLossInfo {
  bool degenerate = false;  // fewer than two present classes
  int pairs = 0;            // ordered pairs summed
};

/// Throws std::invalid_argument if the presence vectors differ.
double interclass_distance_loss(const DistanceGraph& teacher, const DistanceGraph& student,
                                IdLossInfo* info = nullptr);

/// dL/de^S_ij per ordered pair (zero for i == j and undefined pairs).
std::vector<double> interclass_distance_loss_edge_grad(const DistanceGraph& teacher,
                                                       const DistanceGraph& student);

/// Backpropagates per-ordered-pair edge gradients to token gradients.
/// Coincident tokens (zero distance) receive no gradient from that pair.
template <typename T>
std::vector<std::vector<double>> distance_graph_backward(const ClassTokenSet<T>& tokens,
                                                         const DistanceGraph& graph,
                                                         const std::vector<double>& edge_grad);

/// End-to-end L_id from two feature maps sharing one label map. If
/// grad_student is non-null it receives dL/dstudent_features; the teacher
/// side never receives a gradient. Feature widths may differ.
template <typename T>
double interclass_distance_loss(const Tensor<T>& teacher_features, const Tensor<T>& student_features,
                                const LabelMap& labels, int num_classes, Tensor<T>* grad_student,
                                IdLossInfo* info = nullptr);

/// {"num_classes", "presence", "edges" (null where undefined)}.
nlohmann::json graph_to_json(const DistanceGraph& g);

}  // namespace idd::interclass
