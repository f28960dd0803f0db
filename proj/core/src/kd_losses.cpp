#include "idd/kd_losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "idd/interclass.hpp"
#include "idd/nn.hpp"

namespace idd::kd {

// ------------------------------------------------------------- weights ----

void LossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || pair_weight < 0) {
    throw std::invalid_argument("LossWeights: loss weights must be non-negative");
  }
  if (!(tau_pixel > 0) || !(tau_channel > 0)) {
    throw std::invalid_argument("LossWeights: temperatures must be positive");
  }
  if (affinity_grid < 1) throw std::invalid_argument("LossWeights: affinity_grid must be >= 1");
  if (!(pi_epsilon >= 0)) throw std::invalid_argument("LossWeights: pi_epsilon must be >= 0");
}

const std::vector<std::string>& LossWeights::preset_names() {
  static const std::vector<std::string> names = {"baseline",  "skd",       "skd-cw",
                                                 "skd-cw-id", "skd-cw-pi", "full-idd"};
  return names;
}

LossWeights LossWeights::preset(const std::string& name, LossWeights base) {
  base.enable_skd = base.enable_cw = base.enable_id = base.enable_pi = false;
  if (name == "baseline") return base;
  base.enable_skd = true;
  if (name == "skd") return base;
  base.enable_cw = true;
  if (name == "skd-cw") return base;
  if (name == "skd-cw-id") {
    base.enable_id = true;
    return base;
  }
  if (name == "skd-cw-pi") {
    base.enable_pi = true;
    return base;
  }
  if (name == "full-idd") {
    base.enable_id = base.enable_pi = true;
    return base;
  }
  throw std::invalid_argument("unknown preset '" + name +
                              "' (expected baseline, skd, skd-cw, skd-cw-id, skd-cw-pi or full-idd)");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda1", w.lambda1},
                     {"lambda2", w.lambda2},
                     {"lambda3", w.lambda3},
                     {"tau_pixel", w.tau_pixel},
                     {"tau_channel", w.tau_channel},
                     {"pair_weight", w.pair_weight},
                     {"affinity_grid", w.affinity_grid},
                     {"pi_epsilon", w.pi_epsilon},
                     {"pi_reference", w.pi_reference == PiReference::kTeacherHead ? "teacher" : "analytic"},
                     {"enable_skd", w.enable_skd},
                     {"enable_cw", w.enable_cw},
                     {"enable_id", w.enable_id},
                     {"enable_pi", w.enable_pi}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.lambda1 = j.value("lambda1", d.lambda1);
  w.lambda2 = j.value("lambda2", d.lambda2);
  w.lambda3 = j.value("lambda3", d.lambda3);
  w.tau_pixel = j.value("tau_pixel", d.tau_pixel);
  w.tau_channel = j.value("tau_channel", d.tau_channel);
  w.pair_weight = j.value("pair_weight", d.pair_weight);
  w.affinity_grid = j.value("affinity_grid", d.affinity_grid);
  w.pi_epsilon = j.value("pi_epsilon", d.pi_epsilon);
  const std::string ref = j.value("pi_reference", std::string("teacher"));
  if (ref == "teacher") w.pi_reference = PiReference::kTeacherHead;
  else if (ref == "analytic") w.pi_reference = PiReference::kAnalytic;
  else throw std::invalid_argument("pi_reference must be 'teacher' or 'analytic' (got '" + ref + "')");
  w.enable_skd = j.value("enable_skd", d.enable_skd);
  w.enable_cw = j.value("enable_cw", d.enable_cw);
  w.enable_id = j.value("enable_id", d.enable_id);
  w.enable_pi = j.value("enable_pi", d.enable_pi);
  w.validate();
}

double weighted_total(const LossBreakdown& b, const LossWeights& w) {
  double total = b.l_tar;
  total += b.l_skd;
  total += w.lambda1 * b.l_cw;
  total += w.lambda2 * b.l_id;
  total += w.lambda3 * b.l_pi;
  return total;
}

void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = nlohmann::json{{"l_tar", b.l_tar}, {"l_skd", b.l_skd}, {"l_cw", b.l_cw},
                     {"l_id", b.l_id},   {"l_pi", b.l_pi},   {"total", b.total}};
}

void from_json(const nlohmann::json& j, LossBreakdown& b) {
  b.l_tar = j.at("l_tar").get<double>();
  b.l_skd = j.at("l_skd").get<double>();
  b.l_cw = j.at("l_cw").get<double>();
  b.l_id = j.at("l_id").get<double>();
  b.l_pi = j.at("l_pi").get<double>();
  b.total = j.at("total").get<double>();
}

// -------------------------------------------------------------- helpers ----

namespace {

void require_same(const Shape4& a, const Shape4& b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

// Softmax over `count` values spaced `stride` apart, scaled by 1/tau.
template <typename T>
void softmax_strided(const T* x, std::size_t count, std::size_t stride, double tau, std::vector<double>& out,
                     std::vector<double>* log_out = nullptr) {
  out.resize(count);
  double mx = -INFINITY;
  for (std::size_t k = 0; k < count; ++k) mx = std::max(mx, static_cast<double>(x[k * stride]) / tau);
  double z = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    out[k] = std::exp(static_cast<double>(x[k * stride]) / tau - mx);
    z += out[k];
  }
  const double logz = std::log(z) + mx;
  if (log_out) {
    log_out->resize(count);
    for (std::size_t k = 0; k < count; ++k) (*log_out)[k] = static_cast<double>(x[k * stride]) / tau - logz;
  }
  for (auto& v : out) v /= z;
}

}  // namespace

template <typename T>
std::vector<double> spatial_softmax(const T* map, std::size_t count, double tau) {
  std::vector<double> p;
  softmax_strided(map, count, 1, tau, p);
  return p;
}

// --------------------------------------------------------------- L_tar ----

template <typename T>
double cross_entropy_target_loss(const Tensor<T>& logits, const LabelMap& labels, Tensor<T>* grad,
                                 bool* degenerate) {
  if (logits.n() != labels.n || logits.h() != labels.h || logits.w() != labels.w) {
    throw std::invalid_argument("cross_entropy_target_loss: logits " + to_string(logits.shape()) +
                                " do not match the label map");
  }
  labels.validate(logits.c());
  const int N = logits.c();
  const std::size_t P = labels.plane();
  std::size_t valid = 0;
  for (auto v : labels.data) valid += v != kIgnoreLabel ? 1 : 0;
  if (grad) *grad = Tensor<T>(logits.shape());
  if (degenerate) *degenerate = valid == 0;
  if (valid == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(valid);
  double sum = 0.0;
  std::vector<double> prob, logp;
  for (int n = 0; n < logits.n(); ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      const std::uint8_t lab = labels.data[n * P + p];
      if (lab == kIgnoreLabel) continue;
      const T* x = logits.plane(n, 0) + p;
      softmax_strided(x, N, P, 1.0, prob, &logp);
      sum -= logp[lab];
      if (grad) {
        T* g = grad->plane(n, 0) + p;
        for (int k = 0; k < N; ++k) g[k * P] = static_cast<T>((prob[k] - (k == lab ? 1.0 : 0.0)) * inv);
      }
    }
  }
  return sum * inv;
}

// ----------------------------------------------------------- pixel KD ----

template <typename T>
double pixelwise_kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, double tau,
                         Tensor<T>* grad) {
  require_same(teacher_logits.shape(), student_logits.shape(), "pixelwise_kd_loss");
  if (!(tau > 0)) throw std::invalid_argument("pixelwise_kd_loss: tau must be positive");
  const int N = student_logits.c();
  const std::size_t P = student_logits.shape().plane();
  const double pixels = static_cast<double>(student_logits.n()) * P;
  if (grad) *grad = Tensor<T>(student_logits.shape());
  double sum = 0.0;
  std::vector<double> pt, lpt, ps, lps;
  for (int n = 0; n < student_logits.n(); ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      softmax_strided(teacher_logits.plane(n, 0) + p, N, P, tau, pt, &lpt);
      softmax_strided(student_logits.plane(n, 0) + p, N, P, tau, ps, &lps);
      double kl = 0.0;
      for (int k = 0; k < N; ++k) kl += pt[k] * (lpt[k] - lps[k]);
      sum += kl;
      if (grad) {
        T* g = grad->plane(n, 0) + p;
        for (int k = 0; k < N; ++k) g[k * P] = static_cast<T>(tau * (ps[k] - pt[k]) / pixels);
      }
    }
  }
  return tau * tau * sum / pixels;
}

// ------------------------------------------------------ pair affinity ----

namespace {

struct NodeSet {
  int count = 0;  // S²
  int dim = 0;
  std::vector<double> raw;     // count × dim
  std::vector<double> unit;    // normalised rows
  std::vector<double> norms;
};

constexpr double kAffinityEps = 1e-12;

template <typename T>
NodeSet pooled_nodes(const Tensor<T>& pooled, int n) {
  NodeSet s;
  s.count = pooled.h() * pooled.w();
  s.dim = pooled.c();
  s.raw.resize(static_cast<std::size_t>(s.count) * s.dim);
  s.unit.resize(s.raw.size());
  s.norms.resize(s.count);
  for (int a = 0; a < s.count; ++a) {
    double nn = 0.0;
    for (int c = 0; c < s.dim; ++c) {
      const double v = pooled.plane(n, c)[a];
      s.raw[static_cast<std::size_t>(a) * s.dim + c] = v;
      nn += v * v;
    }
    s.norms[a] = std::sqrt(nn);
    for (int c = 0; c < s.dim; ++c) {
      s.unit[static_cast<std::size_t>(a) * s.dim + c] =
          s.raw[static_cast<std::size_t>(a) * s.dim + c] / (s.norms[a] + kAffinityEps);
    }
  }
  return s;
}

double cosine(const NodeSet& s, int a, int b) {
  double acc = 0.0;
  for (int c = 0; c < s.dim; ++c) {
    acc += s.unit[static_cast<std::size_t>(a) * s.dim + c] * s.unit[static_cast<std::size_t>(b) * s.dim + c];
  }
  return acc;
}

}  // namespace

template <typename T>
double pairwise_affinity_loss(const Tensor<T>& teacher_features, const Tensor<T>& student_features, int grid,
                              Tensor<T>* grad) {
  const Shape4 ts = teacher_features.shape(), ss = student_features.shape();
  if (ts.n != ss.n || ts.h != ss.h || ts.w != ss.w) {
    throw std::invalid_argument("pairwise_affinity_loss: spatial shapes " + to_string(ts) + " and " +
                                to_string(ss) + " differ");
  }
  if (grid < 1 || grid > ss.h || grid > ss.w) {
    throw std::invalid_argument("pairwise_affinity_loss: " + std::to_string(grid) + "x" + std::to_string(grid) +
                                " node grid exceeds the " + std::to_string(ss.h) + "x" + std::to_string(ss.w) +
                                " feature map");
  }
  const Tensor<T> tp = nn::adaptive_avg_pool(teacher_features, grid);
  const Tensor<T> sp = nn::adaptive_avg_pool(student_features, grid);
  const int M = grid * grid;
  const double norm = 1.0 / (static_cast<double>(M) * M * ss.n);
  Tensor<T> gpool;
  if (grad) gpool = Tensor<T>(sp.shape());
  double sum = 0.0;
  for (int n = 0; n < ss.n; ++n) {
    const NodeSet tn = pooled_nodes(tp, n);
    const NodeSet sn = pooled_nodes(sp, n);
    std::vector<double> gunit(grad ? sn.unit.size() : 0, 0.0);
    for (int a = 0; a < M; ++a) {
      for (int b = 0; b < M; ++b) {
        const double diff = cosine(sn, a, b) - cosine(tn, a, b);
        sum += diff * diff;
        if (grad) {
          // d/d cos_ab = 2·diff·norm; cos_ab = û_a·û_b.
          const double g = 2.0 * diff * norm;
          for (int c = 0; c < sn.dim; ++c) {
            gunit[static_cast<std::size_t>(a) * sn.dim + c] += g * sn.unit[static_cast<std::size_t>(b) * sn.dim + c];
            gunit[static_cast<std::size_t>(b) * sn.dim + c] += g * sn.unit[static_cast<std::size_t>(a) * sn.dim + c];
          }
        }
      }
    }
    if (grad) {
      for (int a = 0; a < M; ++a) {
        const double nrm = sn.norms[a];
        const double inv = 1.0 / (nrm + kAffinityEps);
        double f_dot_g = 0.0;
        for (int c = 0; c < sn.dim; ++c) {
          f_dot_g += sn.raw[static_cast<std::size_t>(a) * sn.dim + c] * gunit[static_cast<std::size_t>(a) * sn.dim + c];
        }
        const double radial = nrm > 0.0 ? f_dot_g / (nrm * (nrm + kAffinityEps) * (nrm + kAffinityEps)) : 0.0;
        for (int c = 0; c < sn.dim; ++c) {
          const std::size_t k = static_cast<std::size_t>(a) * sn.dim + c;
          gpool.plane(n, c)[a] = static_cast<T>(gunit[k] * inv - sn.raw[k] * radial);
        }
      }
    }
  }
  if (grad) *grad = nn::adaptive_avg_pool_backward(gpool, ss.h, ss.w);
  return sum * norm;
}

// ---------------------------------------------------------- channel KD ----

template <typename T>
double channelwise_kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, double tau,
                           Tensor<T>* grad) {
  require_same(teacher_logits.shape(), student_logits.shape(), "channelwise_kd_loss");
  if (!(tau > 0)) throw std::invalid_argument("channelwise_kd_loss: tau must be positive");
  const int B = student_logits.n();
  const int N = student_logits.c();
  const std::size_t P = student_logits.shape().plane();
  const double scale = tau * tau / (static_cast<double>(N) * B);
  if (grad) *grad = Tensor<T>(student_logits.shape());
  double sum = 0.0;
  std::vector<double> qt, lqt, qs, lqs;
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < N; ++c) {
      softmax_strided(teacher_logits.plane(n, c), P, 1, tau, qt, &lqt);
      softmax_strided(student_logits.plane(n, c), P, 1, tau, qs, &lqs);
      double kl = 0.0;
      for (std::size_t p = 0; p < P; ++p) kl += qt[p] * (lqt[p] - lqs[p]);
      sum += kl;
      if (grad) {
        T* g = grad->plane(n, c);
        for (std::size_t p = 0; p < P; ++p) g[p] = static_cast<T>(scale * (qs[p] - qt[p]) / tau);
      }
    }
  }
  return scale * sum;
}

// ---------------------------------------------------------- composite ----

namespace {

template <typename T>
void add_scaled(Tensor<T>& dst, const Tensor<T>& src, double scale) {
  const T s = static_cast<T>(scale);
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += s * src.data()[i];
}

}  // namespace

template <typename T>
LossBreakdown total_loss(const models::ForwardOutput<T>& teacher, const models::ForwardOutput<T>& student,
                         const LabelMap& labels, const PositionHeads<T>& heads, const LossWeights& weights,
                         StudentGrads<T>* grads, LossDiagnostics* diag) {
  weights.validate();
  if (weights.enable_pi &&
      (!heads.student || (weights.pi_reference == PiReference::kTeacherHead && !heads.teacher))) {
    throw std::invalid_argument("total_loss: L_pi is enabled but the position heads are missing");
  }
  LossDiagnostics local;
  LossBreakdown b;
  const bool want = grads != nullptr;
  Tensor<T> tmp;
  if (want) {
    grads->logits = Tensor<T>(student.logits.shape());
    grads->features = Tensor<T>(student.features.shape());
  }

  b.l_tar = cross_entropy_target_loss(student.logits, labels, want ? &tmp : nullptr, &local.degenerate_batch);
  if (want) add_scaled(grads->logits, tmp, 1.0);

  if (weights.enable_skd) {
    const double pix = pixelwise_kd_loss(teacher.logits, student.logits, weights.tau_pixel, want ? &tmp : nullptr);
    if (want) add_scaled(grads->logits, tmp, 1.0);
    double pair = 0.0;
    if (weights.pair_weight > 0) {
      pair = pairwise_affinity_loss(teacher.features, student.features, weights.affinity_grid,
                                    want ? &tmp : nullptr);
      if (want) add_scaled(grads->features, tmp, weights.pair_weight);
    }
    b.l_skd = pix + weights.pair_weight * pair;
  }
  if (weights.enable_cw) {
    b.l_cw = channelwise_kd_loss(teacher.logits, student.logits, weights.tau_channel, want ? &tmp : nullptr);
    if (want) add_scaled(grads->logits, tmp, weights.lambda1);
  }
  if (weights.enable_id) {
    interclass::IdLossInfo info;
    b.l_id = interclass::interclass_distance_loss(teacher.features, student.features, labels,
                                                  student.logits.c(), want ? &tmp : nullptr, &info);
    local.degenerate_graph = info.degenerate;
    if (want) add_scaled(grads->features, tmp, weights.lambda2);
  }
  if (weights.enable_pi) {
    const Tensor<T> ref = weights.pi_reference == PiReference::kTeacherHead
                              ? heads.teacher->forward(teacher.features, false)
                              : position::make_coordinate_targets<T>(student.features.h(), student.features.w(),
                                                                     student.features.n());
    const Tensor<T> pred = heads.student->forward(student.features, want);
    position::PiLossInfo info;
    b.l_pi = position::position_info_loss(ref, pred, weights.pi_epsilon, want ? &tmp : nullptr, &info);
    local.pi_zero_vectors = info.zero_vectors;
    if (want) {
      for (std::size_t i = 0; i < tmp.size(); ++i) tmp.data()[i] *= static_cast<T>(weights.lambda3);
      add_scaled(grads->features, heads.student->backward(tmp), 1.0);
    }
  }
  b.total = weighted_total(b, weights);
  if (diag) *diag = local;
  return b;
}

#define IDD_INSTANTIATE(T)                                                                              \
  template double cross_entropy_target_loss(const Tensor<T>&, const LabelMap&, Tensor<T>*, bool*);      \
  template double pixelwise_kd_loss(const Tensor<T>&, const Tensor<T>&, double, Tensor<T>*);            \
  template double pairwise_affinity_loss(const Tensor<T>&, const Tensor<T>&, int, Tensor<T>*);          \
  template double channelwise_kd_loss(const Tensor<T>&, const Tensor<T>&, double, Tensor<T>*);          \
  template std::vector<double> spatial_softmax(const T*, std::size_t, double);                          \
  template LossBreakdown total_loss(const models::ForwardOutput<T>&, const models::ForwardOutput<T>&,   \
                                    const LabelMap&, const PositionHeads<T>&, const LossWeights&,       \
                                    StudentGrads<T>*, LossDiagnostics*);

IDD_INSTANTIATE(float)
IDD_INSTANTIATE(double)

#undef IDD_INSTANTIATE

}  // namespace idd::kd
