#pragma once

// Brute-force reference implementations and random instance generators used
// by the unit and acceptance tests. Everything here is written directly from
// the defining formulas with plain loops, in double precision, and shares no
// code with the library beyond the tensor containers.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "idd/tensor.hpp"

namespace idd::oracle {

using Rng = std::mt19937_64;

inline Tensor<double> random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Labels in [0, classes) with roughly `ignore_rate` IGNORE pixels.
inline LabelMap random_labels(Rng& rng, int n, int h, int w, int classes, double ignore_rate = 0.1) {
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  LabelMap m(n, h, w);
  for (auto& v : m.data) v = u(rng) < ignore_rate ? kIgnoreLabel : static_cast<std::uint8_t>(cls(rng));
  return m;
}

// -- class tokens / distance graph -----------------------------------------

struct Tokens {
  std::vector<bool> present;
  std::vector<std::vector<double>> v;
};

inline Tokens class_tokens(const Tensor<double>& f, const LabelMap& lab, int classes) {
  Tokens t;
  t.present.assign(classes, false);
  t.v.assign(classes, std::vector<double>(f.c(), 0.0));
  for (int k = 0; k < classes; ++k) {
    long count = 0;
    for (int n = 0; n < f.n(); ++n)
      for (int y = 0; y < f.h(); ++y)
        for (int x = 0; x < f.w(); ++x)
          if (lab.at(n, y, x) == k) {
            ++count;
            for (int c = 0; c < f.c(); ++c) t.v[k][c] += f.at(n, c, y, x);
          }
    if (count > 0) {
      t.present[k] = true;
      for (auto& x : t.v[k]) x /= static_cast<double>(count);
    }
  }
  return t;
}

inline double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// N×N, NaN where either class is absent.
inline std::vector<double> distance_matrix(const Tokens& t) {
  const int N = static_cast<int>(t.present.size());
  std::vector<double> e(static_cast<std::size_t>(N) * N, std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j)
      if (t.present[i] && t.present[j]) e[static_cast<std::size_t>(i) * N + j] = euclid(t.v[i], t.v[j]);
  return e;
}

/// Σ over unordered present pairs of (e_T − e_S)².
inline double interclass_loss(const Tensor<double>& tf, const Tensor<double>& sf, const LabelMap& lab,
                              int classes) {
  const Tokens tt = class_tokens(tf, lab, classes);
  const Tokens st = class_tokens(sf, lab, classes);
  double s = 0.0;
  for (int i = 0; i < classes; ++i)
    for (int j = i + 1; j < classes; ++j)
      if (tt.present[i] && tt.present[j]) {
        const double d = euclid(tt.v[i], tt.v[j]) - euclid(st.v[i], st.v[j]);
        s += d * d;
      }
  return s;
}

// -- softmax based losses ---------------------------------------------------

inline double cross_entropy(const Tensor<double>& logits, const LabelMap& lab) {
  double s = 0.0;
  long count = 0;
  for (int n = 0; n < logits.n(); ++n)
    for (int y = 0; y < logits.h(); ++y)
      for (int x = 0; x < logits.w(); ++x) {
        const int g = lab.at(n, y, x);
        if (g == kIgnoreLabel) continue;
        double z = 0.0;
        for (int c = 0; c < logits.c(); ++c) z += std::exp(logits.at(n, c, y, x));
        s += -std::log(std::exp(logits.at(n, g, y, x)) / z);
        ++count;
      }
  return count ? s / count : 0.0;
}

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

inline std::vector<double> softmax(const std::vector<double>& x, double tau) {
  std::vector<double> p(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += std::exp(x[i] / tau);
  for (std::size_t i = 0; i < x.size(); ++i) p[i] = std::exp(x[i] / tau) / z;
  return p;
}

inline double pixel_kd(const Tensor<double>& t, const Tensor<double>& s, double tau) {
  double sum = 0.0;
  for (int n = 0; n < t.n(); ++n)
    for (int y = 0; y < t.h(); ++y)
      for (int x = 0; x < t.w(); ++x) {
        std::vector<double> a(t.c()), b(t.c());
        for (int c = 0; c < t.c(); ++c) {
          a[c] = t.at(n, c, y, x);
          b[c] = s.at(n, c, y, x);
        }
        sum += kl(softmax(a, tau), softmax(b, tau));
      }
  return tau * tau * sum / (static_cast<double>(t.n()) * t.h() * t.w());
}

inline double channel_kd(const Tensor<double>& t, const Tensor<double>& s, double tau) {
  double sum = 0.0;
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c) {
      std::vector<double> a, b;
      for (int y = 0; y < t.h(); ++y)
        for (int x = 0; x < t.w(); ++x) {
          a.push_back(t.at(n, c, y, x));
          b.push_back(s.at(n, c, y, x));
        }
      sum += kl(softmax(a, tau), softmax(b, tau));
    }
  return tau * tau * sum / (static_cast<double>(t.c()) * t.n());
}

// -- pair-wise affinity -----------------------------------------------------

/// Mean of x over the PyTorch adaptive-pool cell (by, bx) of a bins×bins grid.
inline double pool_cell(const Tensor<double>& f, int n, int c, int by, int bx, int bins) {
  const int y0 = (by * f.h()) / bins, y1 = ((by + 1) * f.h() + bins - 1) / bins;
  const int x0 = (bx * f.w()) / bins, x1 = ((bx + 1) * f.w() + bins - 1) / bins;
  double s = 0.0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) s += f.at(n, c, y, x);
  return s / ((y1 - y0) * (x1 - x0));
}

inline double pair_affinity(const Tensor<double>& t, const Tensor<double>& s, int grid) {
  const int M = grid * grid;
  double sum = 0.0;
  for (int n = 0; n < t.n(); ++n) {
    auto nodes = [&](const Tensor<double>& f) {
      std::vector<std::vector<double>> v(M, std::vector<double>(f.c()));
      for (int a = 0; a < M; ++a)
        for (int c = 0; c < f.c(); ++c) v[a][c] = pool_cell(f, n, c, a / grid, a % grid, grid);
      return v;
    };
    const auto tv = nodes(t), sv = nodes(s);
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
      }
      return ab / (std::sqrt(aa) * std::sqrt(bb));
    };
    for (int a = 0; a < M; ++a)
      for (int b = 0; b < M; ++b) {
        const double d = cosine(tv[a], tv[b]) - cosine(sv[a], sv[b]);
        sum += d * d;
      }
  }
  return sum / (static_cast<double>(M) * M * t.n());
}

// -- position loss ------------------------------------------------------------

inline double position_loss(const Tensor<double>& t, const Tensor<double>& s) {
  auto unit_dist = [](std::vector<double> a, std::vector<double> b) {
    double na = 0, nb = 0;
    for (double v : a) na += v * v;
    for (double v : b) nb += v * v;
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] / na - b[i] / nb) * (a[i] / na - b[i] / nb);
    return std::sqrt(d);
  };
  double total = 0.0;
  for (int n = 0; n < t.n(); ++n) {
    double hor = 0, ver = 0;
    for (int y = 0; y < t.h(); ++y) {
      std::vector<double> a, b;
      for (int x = 0; x < t.w(); ++x) {
        a.push_back(t.at(n, 0, y, x));
        b.push_back(s.at(n, 0, y, x));
      }
      hor += unit_dist(a, b);
    }
    for (int x = 0; x < t.w(); ++x) {
      std::vector<double> a, b;
      for (int y = 0; y < t.h(); ++y) {
        a.push_back(t.at(n, 1, y, x));
        b.push_back(s.at(n, 1, y, x));
      }
      ver += unit_dist(a, b);
    }
    total += 0.5 * hor + 0.5 * ver;
  }
  return total / t.n();
}

// -- confusion / IoU ---------------------------------------------------------

inline std::vector<long> confusion(const LabelMap& pred, const LabelMap& gt, int classes, long* ignored) {
  std::vector<long> cm(static_cast<std::size_t>(classes) * classes, 0);
  *ignored = 0;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if (gt.data[i] == kIgnoreLabel) {
      ++*ignored;
      continue;
    }
    for (int g = 0; g < classes; ++g)
      for (int p = 0; p < classes; ++p)
        if (gt.data[i] == g && pred.data[i] == p) ++cm[static_cast<std::size_t>(g) * classes + p];
  }
  return cm;
}

/// Per-class IoU (NaN when undefined) and the mean over defined classes.
inline std::vector<double> iou(const std::vector<long>& cm, int classes, double* miou) {
  std::vector<double> out(classes, std::numeric_limits<double>::quiet_NaN());
  double s = 0;
  int k = 0;
  for (int c = 0; c < classes; ++c) {
    long tp = cm[static_cast<std::size_t>(c) * classes + c], fp = 0, fn = 0;
    for (int o = 0; o < classes; ++o) {
      if (o == c) continue;
      fn += cm[static_cast<std::size_t>(c) * classes + o];
      fp += cm[static_cast<std::size_t>(o) * classes + c];
    }
    if (tp + fp + fn == 0) continue;
    out[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    s += out[c];
    ++k;
  }
  *miou = k ? s / k : 0.0;
  return out;
}

// -- finite differences -------------------------------------------------------

/// Central differences of f at x, one coordinate at a time.
inline std::vector<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f,
                                            const Tensor<double>& x, double step = 1e-5) {
  std::vector<double> g(x.size());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = probe.data()[i];
    probe.data()[i] = v + step;
    const double up = f(probe);
    probe.data()[i] = v - step;
    const double down = f(probe);
    probe.data()[i] = v;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

struct GradCheck {
  double worst_rel = 0.0;  // max |a − n| / (|n| + atol/rtol), <= rtol passes
  bool ok = true;
};

inline GradCheck compare_gradients(const Tensor<double>& analytic, const std::vector<double>& numeric,
                                   double rtol = 1e-4, double atol = 1e-8) {
  GradCheck r;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double err = std::abs(analytic.data()[i] - numeric[i]);
    const double allowed = rtol * std::abs(numeric[i]) + atol;
    r.worst_rel = std::max(r.worst_rel, err / (std::abs(numeric[i]) + atol / rtol));
    if (err > allowed) r.ok = false;
  }
  return r;
}

}  // namespace idd::oracle
