#include "idd/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace idd::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct Interp {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

// Half-pixel-centre sampling positions for resizing in_n -> out_n.
Interp interp_table(int in_n, int out_n) {
  Interp t;
  t.lo.resize(out_n);
  t.hi.resize(out_n);
  t.frac.resize(out_n);
  const double scale = static_cast<double>(in_n) / out_n;
  for (int i = 0; i < out_n; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in_n - 1) lo = in_n - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in_n - 1);
    t.frac[i] = src - lo;
  }
  return t;
}

int bin_start(int i, int in_n, int bins) { return (i * in_n) / bins; }
int bin_end(int i, int in_n, int bins) { return ((i + 1) * in_n + bins - 1) / bins; }

}  // namespace

// ---------------------------------------------------------------- Conv2d ----

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, ConvOptions opt, std::string name)
    : in_(in_channels), out_(out_channels), opt_(opt) {
  if (in_channels <= 0 || out_channels <= 0 || opt.kernel <= 0 || opt.stride <= 0 ||
      opt.dilation <= 0 || opt.padding < 0) {
    throw std::invalid_argument("Conv2d " + name + ": invalid configuration");
  }
  weight_.name = name + ".weight";
  weight_.value = Tensor<T>(out_channels, in_channels, opt.kernel, opt.kernel);
  weight_.grad = Tensor<T>(weight_.value.shape());
  if (opt.bias) {
    bias_.name = name + ".bias";
    bias_.value = Tensor<T>(1, out_channels, 1, 1);
    bias_.grad = Tensor<T>(bias_.value.shape());
  }
}

template <typename T>
void Conv2d<T>::init(std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in_) * opt_.kernel * opt_.kernel;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : weight_.value.values()) v = static_cast<T>(dist(rng));
  if (opt_.bias) bias_.value.fill(T(0));
}

template <typename T>
void Conv2d<T>::collect_params(std::vector<Param<T>*>& out) {
  out.push_back(&weight_);
  if (opt_.bias) out.push_back(&bias_);
}

template <typename T>
void Conv2d<T>::im2col(const T* src, int h, int w, int ho, int wo, T* col) const {
  const int k = opt_.kernel;
  const std::size_t cols = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < in_; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * cols;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * opt_.stride - opt_.padding + ky * opt_.dilation;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* srow = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * opt_.stride - opt_.padding + kx * opt_.dilation;
            dst[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void Conv2d<T>::col2im(const T* col, int h, int w, int ho, int wo, T* dst) const {
  const int k = opt_.kernel;
  const std::size_t cols = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < in_; ++c) {
    T* plane = dst + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * cols;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * opt_.stride - opt_.padding + ky * opt_.dilation;
          if (iy < 0 || iy >= h) continue;
          T* drow = plane + static_cast<std::size_t>(iy) * w;
          const T* srow = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * opt_.stride - opt_.padding + kx * opt_.dilation;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, bool cache) {
  if (x.c() != in_) {
    throw std::invalid_argument(weight_.name + ": expected " + std::to_string(in_) +
                                " input channels, got " + std::to_string(x.c()));
  }
  const int ho = output_extent(x.h());
  const int wo = output_extent(x.w());
  if (ho <= 0 || wo <= 0) throw std::invalid_argument(weight_.name + ": input too small");
  Tensor<T> y(x.n(), out_, ho, wo);
  const int kdim = in_ * opt_.kernel * opt_.kernel;
  const int cols = ho * wo;
  ConstMapMat<T> W(weight_.value.data(), out_, kdim);
  AlignedVector<T> col;
  if (!is_pointwise()) col.resize(static_cast<std::size_t>(kdim) * cols);
  for (int n = 0; n < x.n(); ++n) {
    const T* src = x.sample(n);
    if (!is_pointwise()) {
      im2col(src, x.h(), x.w(), ho, wo, col.data());
      src = col.data();
    }
    MapMat<T> Y(y.sample(n), out_, cols);
    Y.noalias() = W * ConstMapMat<T>(src, kdim, cols);
    if (opt_.bias) {
      for (int o = 0; o < out_; ++o) Y.row(o).array() += bias_.value.data()[o];
    }
  }
  if (cache) input_ = x;
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& gy) {
  const Tensor<T>& x = input_;
  if (x.empty()) throw std::logic_error(weight_.name + ": backward without cached forward");
  const int ho = gy.h();
  const int wo = gy.w();
  const int kdim = in_ * opt_.kernel * opt_.kernel;
  const int cols = ho * wo;
  Tensor<T> gx(x.shape());
  ConstMapMat<T> W(weight_.value.data(), out_, kdim);
  MapMat<T> dW(weight_.grad.data(), out_, kdim);
  AlignedVector<T> col, dcol;
  if (!is_pointwise()) {
    col.resize(static_cast<std::size_t>(kdim) * cols);
    dcol.resize(col.size());
  }
  for (int n = 0; n < x.n(); ++n) {
    ConstMapMat<T> G(gy.sample(n), out_, cols);
    if (opt_.bias) {
      for (int o = 0; o < out_; ++o) bias_.grad.data()[o] += G.row(o).sum();
    }
    if (is_pointwise()) {
      dW.noalias() += G * ConstMapMat<T>(x.sample(n), kdim, cols).transpose();
      MapMat<T>(gx.sample(n), kdim, cols).noalias() = W.transpose() * G;
    } else {
      im2col(x.sample(n), x.h(), x.w(), ho, wo, col.data());
      dW.noalias() += G * ConstMapMat<T>(col.data(), kdim, cols).transpose();
      MapMat<T>(dcol.data(), kdim, cols).noalias() = W.transpose() * G;
      col2im(dcol.data(), x.h(), x.w(), ho, wo, gx.sample(n));
    }
  }
  return gx;
}

// ------------------------------------------------------------------ Relu ----

template <typename T>
Tensor<T> Relu<T>::forward(const Tensor<T>& x, bool cache) {
  Tensor<T> y(x.shape());
  const T* src = x.data();
  T* dst = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  if (cache) output_ = y;
  return y;
}

template <typename T>
Tensor<T> Relu<T>::backward(const Tensor<T>& gy) {
  Tensor<T> gx(gy.shape());
  const T* y = output_.data();
  for (std::size_t i = 0; i < gy.size(); ++i) gx.data()[i] = y[i] > T(0) ? gy.data()[i] : T(0);
  return gx;
}

// ------------------------------------------------------ resize / pooling ----

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (x.h() == out_h && x.w() == out_w) return x;
  const Interp ty = interp_table(x.h(), out_h);
  const Interp tx = interp_table(x.w(), out_w);
  Tensor<T> y(x.n(), x.c(), out_h, out_w);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.plane(n, c);
      T* dst = y.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const T* r0 = src + static_cast<std::size_t>(ty.lo[oy]) * x.w();
        const T* r1 = src + static_cast<std::size_t>(ty.hi[oy]) * x.w();
        const T fy = static_cast<T>(ty.frac[oy]);
        for (int ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T top = r0[tx.lo[ox]] * (T(1) - fx) + r0[tx.hi[ox]] * fx;
          const T bot = r1[tx.lo[ox]] * (T(1) - fx) + r1[tx.hi[ox]] * fx;
          dst[static_cast<std::size_t>(oy) * out_w + ox] = top * (T(1) - fy) + bot * fy;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample_bilinear_backward(const Tensor<T>& gy, int in_h, int in_w) {
  if (gy.h() == in_h && gy.w() == in_w) return gy;
  const Interp ty = interp_table(in_h, gy.h());
  const Interp tx = interp_table(in_w, gy.w());
  Tensor<T> gx(gy.n(), gy.c(), in_h, in_w);
  for (int n = 0; n < gy.n(); ++n) {
    for (int c = 0; c < gy.c(); ++c) {
      const T* g = gy.plane(n, c);
      T* dst = gx.plane(n, c);
      for (int oy = 0; oy < gy.h(); ++oy) {
        T* r0 = dst + static_cast<std::size_t>(ty.lo[oy]) * in_w;
        T* r1 = dst + static_cast<std::size_t>(ty.hi[oy]) * in_w;
        const T fy = static_cast<T>(ty.frac[oy]);
        for (int ox = 0; ox < gy.w(); ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T v = g[static_cast<std::size_t>(oy) * gy.w() + ox];
          r0[tx.lo[ox]] += v * (T(1) - fy) * (T(1) - fx);
          r0[tx.hi[ox]] += v * (T(1) - fy) * fx;
          r1[tx.lo[ox]] += v * fy * (T(1) - fx);
          r1[tx.hi[ox]] += v * fy * fx;
        }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int bins) {
  if (bins <= 0 || bins > x.h() || bins > x.w()) {
    throw std::invalid_argument("adaptive_avg_pool: " + std::to_string(bins) +
                                " bins do not fit a " + std::to_string(x.h()) + "x" +
                                std::to_string(x.w()) + " grid");
  }
  Tensor<T> y(x.n(), x.c(), bins, bins);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.plane(n, c);
      for (int by = 0; by < bins; ++by) {
        const int y0 = bin_start(by, x.h(), bins), y1 = bin_end(by, x.h(), bins);
        for (int bx = 0; bx < bins; ++bx) {
          const int x0 = bin_start(bx, x.w(), bins), x1 = bin_end(bx, x.w(), bins);
          double acc = 0;
          for (int yy = y0; yy < y1; ++yy)
            for (int xx = x0; xx < x1; ++xx) acc += src[static_cast<std::size_t>(yy) * x.w() + xx];
          y.at(n, c, by, bx) = static_cast<T>(acc / ((y1 - y0) * (x1 - x0)));
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> adaptive_avg_pool_backward(const Tensor<T>& gy, int in_h, int in_w) {
  const int bins = gy.h();
  Tensor<T> gx(gy.n(), gy.c(), in_h, in_w);
  for (int n = 0; n < gy.n(); ++n) {
    for (int c = 0; c < gy.c(); ++c) {
      T* dst = gx.plane(n, c);
      for (int by = 0; by < bins; ++by) {
        const int y0 = bin_start(by, in_h, bins), y1 = bin_end(by, in_h, bins);
        for (int bx = 0; bx < bins; ++bx) {
          const int x0 = bin_start(bx, in_w, bins), x1 = bin_end(bx, in_w, bins);
          const T v = gy.at(n, c, by, bx) / static_cast<T>((y1 - y0) * (x1 - x0));
          for (int yy = y0; yy < y1; ++yy)
            for (int xx = x0; xx < x1; ++xx) dst[static_cast<std::size_t>(yy) * in_w + xx] += v;
        }
      }
    }
  }
  return gx;
}

// -------------------------------------------------------- PyramidPooling ----

template <typename T>
PyramidPooling<T>::PyramidPooling(int channels, int branch_channels, std::vector<int> bins,
                                  const std::string& name)
    : channels_(channels), branch_channels_(branch_channels), bins_(std::move(bins)) {
  for (std::size_t i = 0; i < bins_.size(); ++i) {
    proj_.push_back(std::make_unique<Conv2d<T>>(
        channels, branch_channels, ConvOptions{1, 1, 0, 1, true},
        name + ".branch" + std::to_string(bins_[i])));
  }
  relu_.resize(bins_.size());
}

template <typename T>
void PyramidPooling<T>::init(std::mt19937_64& rng) {
  for (auto& p : proj_) p->init(rng);
}

template <typename T>
void PyramidPooling<T>::collect_params(std::vector<Param<T>*>& out) {
  for (auto& p : proj_) p->collect_params(out);
}

template <typename T>
Tensor<T> PyramidPooling<T>::forward(const Tensor<T>& x, bool cache) {
  if (x.c() != channels_) throw std::invalid_argument("PyramidPooling: channel mismatch");
  Tensor<T> y(x.n(), output_channels(), x.h(), x.w());
  const std::size_t plane = x.shape().plane();
  for (int n = 0; n < x.n(); ++n) {
    std::copy(x.sample(n), x.sample(n) + channels_ * plane, y.sample(n));
  }
  for (std::size_t b = 0; b < bins_.size(); ++b) {
    const Tensor<T> pooled = adaptive_avg_pool(x, bins_[b]);
    const Tensor<T> act = relu_[b].forward(proj_[b]->forward(pooled, cache), cache);
    const Tensor<T> up = upsample_bilinear(act, x.h(), x.w());
    const int offset = channels_ + static_cast<int>(b) * branch_channels_;
    for (int n = 0; n < x.n(); ++n) {
      std::copy(up.sample(n), up.sample(n) + branch_channels_ * plane, y.plane(n, offset));
    }
  }
  if (cache) {
    in_h_ = x.h();
    in_w_ = x.w();
  }
  return y;
}

template <typename T>
Tensor<T> PyramidPooling<T>::backward(const Tensor<T>& gy) {
  const std::size_t plane = static_cast<std::size_t>(in_h_) * in_w_;
  Tensor<T> gx(gy.n(), channels_, in_h_, in_w_);
  for (int n = 0; n < gy.n(); ++n) {
    std::copy(gy.sample(n), gy.sample(n) + channels_ * plane, gx.sample(n));
  }
  for (std::size_t b = 0; b < bins_.size(); ++b) {
    const int offset = channels_ + static_cast<int>(b) * branch_channels_;
    Tensor<T> g_up(gy.n(), branch_channels_, in_h_, in_w_);
    for (int n = 0; n < gy.n(); ++n) {
      std::copy(gy.plane(n, offset), gy.plane(n, offset) + branch_channels_ * plane, g_up.sample(n));
    }
    const Tensor<T> g_act = upsample_bilinear_backward(g_up, bins_[b], bins_[b]);
    const Tensor<T> g_pool = proj_[b]->backward(relu_[b].backward(g_act));
    const Tensor<T> g_in = adaptive_avg_pool_backward(g_pool, in_h_, in_w_);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] += g_in.data()[i];
  }
  return gx;
}

// ------------------------------------------------------------ Sequential ----

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, bool cache) {
  Tensor<T> h = x;
  for (auto& l : layers_) h = l->forward(h, cache);
  return h;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& gy) {
  Tensor<T> g = gy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

template <typename T>
void Sequential<T>::collect_params(std::vector<Param<T>*>& out) {
  for (auto& l : layers_) l->collect_params(out);
}

// ------------------------------------------------------------------- Sgd ----

template <typename T>
Sgd<T>::Sgd(std::vector<Param<T>*> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (auto* p : params_) velocity_.emplace_back(p->size(), T(0));
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto* p : params_) p->grad.fill(T(0));
}

template <typename T>
void Sgd<T>::step(double lr) {
  const T m = static_cast<T>(momentum_);
  const T wd = static_cast<T>(weight_decay_);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param<T>& p = *params_[i];
    if (p.frozen) continue;
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* v = velocity_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = m * v[j] + (g[j] + wd * w[j]);
      w[j] -= rate * v[j];
    }
  }
}

template <typename T>
void Sgd<T>::set_state(std::vector<std::vector<T>> state) {
  if (state.size() != params_.size()) throw std::invalid_argument("Sgd: state arity mismatch");
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state[i].size() != params_[i]->size()) throw std::invalid_argument("Sgd: state size mismatch");
  }
  velocity_ = std::move(state);
}

template <typename T>
double clip_grad_norm(std::span<Param<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) {
    if (p->frozen) continue;
    for (std::size_t i = 0; i < p->size(); ++i) sq += static_cast<double>(p->grad.data()[i]) * p->grad.data()[i];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto f = static_cast<T>(max_norm / norm);
    for (auto* p : params) {
      if (p->frozen) continue;
      for (std::size_t i = 0; i < p->size(); ++i) p->grad.data()[i] *= f;
    }
  }
  return norm;
}

#define IDD_INSTANTIATE(T)                                                         \
  template double clip_grad_norm(std::span<Param<T>* const>, double);              \
  template class Conv2d<T>;                                                        \
  template class Relu<T>;                                                          \
  template class PyramidPooling<T>;                                                \
  template class Sequential<T>;                                                    \
  template class Sgd<T>;                                                           \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, int, int);                \
  template Tensor<T> upsample_bilinear_backward(const Tensor<T>&, int, int);       \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, int);                     \
  template Tensor<T> adaptive_avg_pool_backward(const Tensor<T>&, int, int);

IDD_INSTANTIATE(float)
IDD_INSTANTIATE(double)

#undef IDD_INSTANTIATE

}  // namespace idd::nn
