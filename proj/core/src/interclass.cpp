#include "idd/interclass.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace idd::interclass {

template <typename T>
std::vector<int> ClassTokenSet<T>::present_classes() const {
  std::vector<int> out;
  for (int c = 0; c < num_classes; ++c)
    if (pixel_counts[c] > 0) out.push_back(c);
  return out;
}

int DistanceGraph::present_count() const {
  int n = 0;
  for (bool p : presence) n += p ? 1 : 0;
  return n;
}

namespace {

void check_shapes(const Shape4& f, const LabelMap& labels) {
  if (f.n != labels.n || f.h != labels.h || f.w != labels.w) {
    throw std::invalid_argument("feature map " + to_string(f) + " and label map [" +
                                std::to_string(labels.n) + "x" + std::to_string(labels.h) + "x" +
                                std::to_string(labels.w) + "] disagree");
  }
}

}  // namespace

template <typename T>
ClassTokenSet<T> compute_class_tokens(const Tensor<T>& features, const LabelMap& labels,
                                      int num_classes) {
  check_shapes(features.shape(), labels);
  labels.validate(num_classes);
  const int C = features.c();
  const std::size_t P = labels.plane();
  std::vector<std::vector<double>> sums(num_classes, std::vector<double>(C, 0.0));
  std::vector<std::int64_t> counts(num_classes, 0);
  for (int n = 0; n < labels.n; ++n) {
    const std::uint8_t* lab = labels.data.data() + n * P;
    for (std::size_t p = 0; p < P; ++p)
      if (lab[p] != kIgnoreLabel) ++counts[lab[p]];
    for (int c = 0; c < C; ++c) {
      const T* plane = features.plane(n, c);
      for (std::size_t p = 0; p < P; ++p)
        if (lab[p] != kIgnoreLabel) sums[lab[p]][c] += plane[p];
    }
  }
  ClassTokenSet<T> out;
  out.num_classes = num_classes;
  out.dim = C;
  out.tokens.resize(num_classes);
  out.pixel_counts = counts;
  for (int k = 0; k < num_classes; ++k) {
    if (counts[k] == 0) continue;
    out.tokens[k].resize(C);
    for (int c = 0; c < C; ++c) out.tokens[k][c] = static_cast<T>(sums[k][c] / counts[k]);
  }
  return out;
}

template <typename T>
Tensor<T> class_tokens_backward(const std::vector<std::vector<double>>& grad_tokens,
                                const ClassTokenSet<T>& tokens, const LabelMap& labels,
                                const Shape4& feature_shape) {
  check_shapes(feature_shape, labels);
  Tensor<T> grad(feature_shape);
  const std::size_t P = labels.plane();
  // Per-class scaled gradient, laid out [class][channel].
  std::vector<std::vector<T>> scaled(tokens.num_classes);
  for (int k = 0; k < tokens.num_classes; ++k) {
    if (!tokens.present(k) || grad_tokens[k].empty()) continue;
    scaled[k].resize(feature_shape.c);
    for (int c = 0; c < feature_shape.c; ++c)
      scaled[k][c] = static_cast<T>(grad_tokens[k][c] / static_cast<double>(tokens.pixel_counts[k]));
  }
  for (int n = 0; n < labels.n; ++n) {
    const std::uint8_t* lab = labels.data.data() + n * P;
    for (int c = 0; c < feature_shape.c; ++c) {
      T* plane = grad.plane(n, c);
      for (std::size_t p = 0; p < P; ++p) {
        if (lab[p] == kIgnoreLabel || scaled[lab[p]].empty()) continue;
        plane[p] = scaled[lab[p]][c];
      }
    }
  }
  return grad;
}

template <typename T>
DistanceGraph compute_distance_graph(const ClassTokenSet<T>& tokens, int num_classes) {
  if (tokens.num_classes != num_classes) {
    throw std::invalid_argument("compute_distance_graph: token set has " +
                                std::to_string(tokens.num_classes) + " classes, expected " +
                                std::to_string(num_classes));
  }
  int dim = -1;
  for (int k = 0; k < num_classes; ++k) {
    if (!tokens.present(k)) continue;
    const int d = static_cast<int>(tokens.tokens[k].size());
    if (dim >= 0 && d != dim) throw std::invalid_argument("compute_distance_graph: mixed token dimensions");
    dim = d;
  }
  DistanceGraph g;
  g.num_classes = num_classes;
  g.edges.assign(static_cast<std::size_t>(num_classes) * num_classes,
                 std::numeric_limits<double>::quiet_NaN());
  g.presence.resize(num_classes);
  for (int k = 0; k < num_classes; ++k) g.presence[k] = tokens.present(k);
  for (int i = 0; i < num_classes; ++i) {
    if (!g.presence[i]) continue;
    g.edges[static_cast<std::size_t>(i) * num_classes + i] = 0.0;
    for (int j = i + 1; j < num_classes; ++j) {
      if (!g.presence[j]) continue;
      double acc = 0.0;
      for (int c = 0; c < dim; ++c) {
        const double d = static_cast<double>(tokens.tokens[i][c]) - static_cast<double>(tokens.tokens[j][c]);
        acc += d * d;
      }
      const double e = std::sqrt(acc);
      g.edges[static_cast<std::size_t>(i) * num_classes + j] = e;
      g.edges[static_cast<std::size_t>(j) * num_classes + i] = e;
    }
  }
  return g;
}

namespace {

void check_compatible(const DistanceGraph& t, const DistanceGraph& s) {
  if (t.num_classes != s.num_classes) {
    throw std::invalid_argument("interclass_distance_loss: graphs have " + std::to_string(t.num_classes) +
                                " and " + std::to_string(s.num_classes) + " classes");
  }
  if (t.presence != s.presence) {
    throw std::invalid_argument(
        "interclass_distance_loss: teacher and student class presence differ "
        "(graphs must be built from the same label map)");
  }
}

}  // namespace

double interclass_distance_loss(const DistanceGraph& teacher, const DistanceGraph& student,
                                IdLossInfo* info) {
  check_compatible(teacher, student);
  const int N = teacher.num_classes;
  double sum = 0.0;
  int pairs = 0;
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) {
      if (i == j || !teacher.defined(i, j)) continue;
      const double d = teacher.edge(i, j) - student.edge(i, j);
      sum += d * d;
      ++pairs;
    }
  }
  if (info) {
    info->pairs = pairs;
    info->degenerate = teacher.present_count() < 2;
  }
  return 0.5 * sum;
}

std::vector<double> interclass_distance_loss_edge_grad(const DistanceGraph& teacher,
                                                       const DistanceGraph& student) {
  check_compatible(teacher, student);
  const int N = teacher.num_classes;
  std::vector<double> g(static_cast<std::size_t>(N) * N, 0.0);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) {
      if (i == j || !teacher.defined(i, j)) continue;
      g[static_cast<std::size_t>(i) * N + j] = student.edge(i, j) - teacher.edge(i, j);
    }
  }
  return g;
}

template <typename T>
std::vector<std::vector<double>> distance_graph_backward(const ClassTokenSet<T>& tokens,
                                                         const DistanceGraph& graph,
                                                         const std::vector<double>& edge_grad) {
  const int N = graph.num_classes;
  std::vector<std::vector<double>> grad(N);
  for (int k = 0; k < N; ++k)
    if (tokens.present(k)) grad[k].assign(tokens.dim, 0.0);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) {
      if (i == j || !graph.defined(i, j)) continue;
      const double e = graph.edge(i, j);
      const double g = edge_grad[static_cast<std::size_t>(i) * N + j];
      if (e <= 0.0 || g == 0.0) continue;
      for (int c = 0; c < tokens.dim; ++c) {
        const double u = (static_cast<double>(tokens.tokens[i][c]) - static_cast<double>(tokens.tokens[j][c])) / e;
        grad[i][c] += g * u;
        grad[j][c] -= g * u;
      }
    }
  }
  return grad;
}

template <typename T>
double interclass_distance_loss(const Tensor<T>& teacher_features, const Tensor<T>& student_features,
                                const LabelMap& labels, int num_classes, Tensor<T>* grad_student,
                                IdLossInfo* info) {
  const auto t_tokens = compute_class_tokens(teacher_features, labels, num_classes);
  const auto s_tokens = compute_class_tokens(student_features, labels, num_classes);
  const DistanceGraph tg = compute_distance_graph(t_tokens, num_classes);
  const DistanceGraph sg = compute_distance_graph(s_tokens, num_classes);
  const double loss = interclass_distance_loss(tg, sg, info);
  if (grad_student) {
    const auto edge_grad = interclass_distance_loss_edge_grad(tg, sg);
    const auto token_grad = distance_graph_backward(s_tokens, sg, edge_grad);
    *grad_student = class_tokens_backward(token_grad, s_tokens, labels, student_features.shape());
  }
  return loss;
}

nlohmann::json graph_to_json(const DistanceGraph& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (int i = 0; i < g.num_classes; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < g.num_classes; ++j) {
      if (g.defined(i, j)) row.push_back(g.edge(i, j));
      else row.push_back(nullptr);
    }
    edges.push_back(std::move(row));
  }
  std::vector<bool> presence = g.presence;
  return {{"num_classes", g.num_classes}, {"presence", presence}, {"edges", edges}};
}

#define IDD_INSTANTIATE(T)                                                                          \
  template struct ClassTokenSet<T>;                                                                 \
  template ClassTokenSet<T> compute_class_tokens(const Tensor<T>&, const LabelMap&, int);           \
  template Tensor<T> class_tokens_backward(const std::vector<std::vector<double>>&,                 \
                                           const ClassTokenSet<T>&, const LabelMap&, const Shape4&); \
  template DistanceGraph compute_distance_graph(const ClassTokenSet<T>&, int);                      \
  template std::vector<std::vector<double>> distance_graph_backward(                                \
      const ClassTokenSet<T>&, const DistanceGraph&, const std::vector<double>&);                   \
  template double interclass_distance_loss(const Tensor<T>&, const Tensor<T>&, const LabelMap&, int, \
                                           Tensor<T>*, IdLossInfo*);

IDD_INSTANTIATE(float)
IDD_INSTANTIATE(double)

#undef IDD_INSTANTIATE

}  // namespace idd::interclass
