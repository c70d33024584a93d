#include "glandseg/layers.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace glandseg {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Row (c, ky, kx) of `cols` holds input channel c shifted by (ky - pad, kx - pad).
template <typename T>
void im2col(const T* x, int channels, int h, int w, int k, int pad, T* cols) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    const T* plane = x + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c * k + ky) * k + kx) * hw;
        const int dy = ky - pad, dx = kx - pad;
        const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          T* r = row + static_cast<std::size_t>(y) * w;
          const int sy = y + dy;
          if (sy < 0 || sy >= h || x_lo >= x_hi) {
            std::fill(r, r + w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * w;
          std::fill(r, r + x_lo, T(0));
          std::copy(src + x_lo + dx, src + x_hi + dx, r + x_lo);
          std::fill(r + x_hi, r + w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int channels, int h, int w, int k, int pad, T* dx) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    T* plane = dx + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c * k + ky) * k + kx) * hw;
        const int dy = ky - pad, ddx = kx - pad;
        const int x_lo = std::max(0, -ddx), x_hi = std::min(w, w - ddx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* r = row + static_cast<std::size_t>(y) * w;
          T* dst = plane + static_cast<std::size_t>(sy) * w + ddx;
          for (int x = x_lo; x < x_hi; ++x) dst[x] += r[x];
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buffer;
  return buffer;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
Conv2d<T>::Conv2d(ParamSet<T>& weights, const std::string& name, int in_channels, int out_channels, int kernel,
                  bool bias)
    : cin_(in_channels), cout_(out_channels), k_(kernel) {
  weight_ = weights.add(name + ".weight", {out_channels, in_channels, kernel, kernel});
  if (bias) bias_ = weights.add(name + ".bias", {out_channels});
}

template <typename T>
void Conv2d<T>::forward(const ParamSet<T>& weights, const Tensor<T>& x, Tensor<T>& y) const {
  if (x.c() != cin_) {
    throw ShapeError("conv expects " + std::to_string(cin_) + " input channels, got " + x.shape_string());
  }
  const int h = x.h(), w = x.w();
  const int hw = h * w;
  const int kk = cin_ * k_ * k_;
  y = Tensor<T>(x.n(), cout_, h, w);
  ConstMatMap<T> wm(weights.data(weight_), cout_, kk);
  auto& cols = scratch<T>();
  if (k_ > 1) cols.resize(static_cast<std::size_t>(kk) * hw);
  for (int n = 0; n < x.n(); ++n) {
    const T* src = x.sample(n);
    if (k_ > 1) {
      im2col(src, cin_, h, w, k_, (k_ - 1) / 2, cols.data());
      src = cols.data();
    }
    ConstMatMap<T> cm(src, kk, hw);
    MatMap<T> ym(y.sample(n), cout_, hw);
    ym.noalias() = wm * cm;
    if (bias_ >= 0) {
      const T* b = weights.data(bias_);
      for (int o = 0; o < cout_; ++o) ym.row(o).array() += b[o];
    }
  }
}

template <typename T>
void Conv2d<T>::backward(const BackwardContext<T>& ctx, const Tensor<T>& x, const Tensor<T>& dy,
                         Tensor<T>* dx) const {
  const int h = x.h(), w = x.w();
  const int hw = h * w;
  const int kk = cin_ * k_ * k_;
  ConstMatMap<T> wm(ctx.weights.data(weight_), cout_, kk);
  MatMap<T> dwm(ctx.grads.data(weight_), cout_, kk);
  if (dx) *dx = Tensor<T>(x.n(), cin_, h, w);
  auto& cols = scratch<T>();
  std::vector<T> dcols;
  if (k_ > 1) cols.resize(static_cast<std::size_t>(kk) * hw);
  if (dx && k_ > 1) dcols.resize(static_cast<std::size_t>(kk) * hw);
  for (int n = 0; n < x.n(); ++n) {
    const T* src = x.sample(n);
    if (k_ > 1) {
      im2col(src, cin_, h, w, k_, (k_ - 1) / 2, cols.data());
      src = cols.data();
    }
    ConstMatMap<T> cm(src, kk, hw);
    ConstMatMap<T> dym(dy.sample(n), cout_, hw);
    dwm.noalias() += dym * cm.transpose();
    if (bias_ >= 0) {
      T* db = ctx.grads.data(bias_);
      // Plain loop: Eigen's vectorised sum peels by address, which would make
      // the summation order depend on heap alignment.
      for (int o = 0; o < cout_; ++o) {
        const T* row = dy.sample(n) + static_cast<std::size_t>(o) * hw;
        T s = 0;
        for (int i = 0; i < hw; ++i) s += row[i];
        db[o] += s;
      }
    }
    if (dx) {
      if (k_ > 1) {
        MatMap<T> dcm(dcols.data(), kk, hw);
        dcm.noalias() = wm.transpose() * dym;
        col2im_add(dcols.data(), cin_, h, w, k_, (k_ - 1) / 2, dx->sample(n));
      } else {
        MatMap<T> dxm(dx->sample(n), cin_, hw);
        dxm.noalias() = wm.transpose() * dym;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(ParamSet<T>& weights, ParamSet<T>& stats, const std::string& name, int channels)
    : channels_(channels) {
  gamma_ = weights.add(name + ".gamma", {channels}, T(1));
  beta_ = weights.add(name + ".beta", {channels}, T(0));
  mean_ = stats.add(name + ".running_mean", {channels}, T(0));
  var_ = stats.add(name + ".running_var", {channels}, T(1));
}

template <typename T>
void BatchNorm<T>::forward(const ForwardContext<T>& ctx, Tensor<T>& x, Cache* cache) const {
  const T* gamma = ctx.weights.data(gamma_);
  const T* beta = ctx.weights.data(beta_);
  const std::size_t hw = x.plane_size();
  const int batch = x.n();
  if (ctx.mode == Mode::kInfer) {
    const T* mean = ctx.stats.data(mean_);
    const T* var = ctx.stats.data(var_);
    for (int c = 0; c < channels_; ++c) {
      const T scale = gamma[c] / std::sqrt(var[c] + static_cast<T>(ctx.bn_epsilon));
      const T shift = beta[c] - mean[c] * scale;
      for (int n = 0; n < batch; ++n) {
        T* p = x.plane(n, c);
        for (std::size_t i = 0; i < hw; ++i) p[i] = p[i] * scale + shift;
      }
    }
    return;
  }

  if (!cache) throw Error("batch norm in train mode needs a cache");
  cache->xhat = Tensor<T>(x.n(), x.c(), x.h(), x.w());
  cache->inv_std.assign(static_cast<std::size_t>(channels_), T(0));
  const double count = static_cast<double>(batch) * hw;
  T* run_mean = ctx.stats_update ? ctx.stats_update->data(mean_) : nullptr;
  T* run_var = ctx.stats_update ? ctx.stats_update->data(var_) : nullptr;
  for (int c = 0; c < channels_; ++c) {
    double sum = 0.0;
    for (int n = 0; n < batch; ++n) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) sum += p[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (int n = 0; n < batch; ++n) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / count;
    const double inv_std = 1.0 / std::sqrt(var + ctx.bn_epsilon);
    cache->inv_std[static_cast<std::size_t>(c)] = static_cast<T>(inv_std);
    for (int n = 0; n < batch; ++n) {
      T* p = x.plane(n, c);
      T* xh = cache->xhat.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        xh[i] = static_cast<T>((p[i] - mean) * inv_std);
        p[i] = gamma[c] * xh[i] + beta[c];
      }
    }
    if (run_mean) {
      const double m = ctx.bn_momentum;
      const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
      run_mean[c] = static_cast<T>(m * run_mean[c] + (1.0 - m) * mean);
      run_var[c] = static_cast<T>(m * run_var[c] + (1.0 - m) * unbiased);
    }
  }
}

template <typename T>
void BatchNorm<T>::backward(const BackwardContext<T>& ctx, const Cache& cache, Tensor<T>& dy) const {
  const T* gamma = ctx.weights.data(gamma_);
  T* dgamma = ctx.grads.data(gamma_);
  T* dbeta = ctx.grads.data(beta_);
  const std::size_t hw = dy.plane_size();
  const int batch = dy.n();
  const double count = static_cast<double>(batch) * hw;
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < batch; ++n) {
      const T* g = dy.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += g[i];
        sum_dy_xhat += static_cast<double>(g[i]) * xh[i];
      }
    }
    dgamma[c] += static_cast<T>(sum_dy_xhat);
    dbeta[c] += static_cast<T>(sum_dy);
    const double scale = gamma[c] * cache.inv_std[static_cast<std::size_t>(c)] / count;
    const double mean_dy = sum_dy, mean_dy_xhat = sum_dy_xhat;
    for (int n = 0; n < batch; ++n) {
      T* g = dy.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        g[i] = static_cast<T>(scale * (count * g[i] - mean_dy - xh[i] * mean_dy_xhat));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// ConvUnit / ConvBlock / UpConvBlock

template <typename T>
ConvUnit<T>::ConvUnit(ParamSet<T>& weights, ParamSet<T>& stats, const std::string& name, int in_channels,
                      int out_channels, int kernel)
    : conv_(weights, name + ".conv", in_channels, out_channels, kernel, false),
      bn_(weights, stats, name + ".bn", out_channels) {}

template <typename T>
Tensor<T> ConvUnit<T>::forward(const ForwardContext<T>& ctx, const Tensor<T>& x, Cache* cache) const {
  Tensor<T> y;
  conv_.forward(ctx.weights, x, y);
  bn_.forward(ctx, y, cache ? &cache->bn : nullptr);
  for (auto& v : y.values()) v = std::max(v, T(0));
  if (cache) cache->out = y;
  return y;
}

template <typename T>
void ConvUnit<T>::backward(const BackwardContext<T>& ctx, const Tensor<T>& x, const Cache& cache,
                           const Tensor<T>& dy, Tensor<T>* dx) const {
  Tensor<T> g = dy;
  const auto out = cache.out.values();
  auto gv = g.values();
  for (std::size_t i = 0; i < gv.size(); ++i) {
    if (!(out[i] > T(0))) gv[i] = T(0);
  }
  bn_.backward(ctx, cache.bn, g);
  conv_.backward(ctx, x, g, dx);
}

template <typename T>
ConvBlock<T>::ConvBlock(ParamSet<T>& weights, ParamSet<T>& stats, const std::string& name, int in_channels,
                        int filters, int kernel)
    : name_(name),
      first_(weights, stats, name + ".unit1", in_channels, filters, kernel),
      second_(weights, stats, name + ".unit2", filters, filters, kernel) {}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const ForwardContext<T>& ctx, const Tensor<T>& x, Cache* cache) const {
  if (x.h() < first_.conv().kernel() || x.w() < first_.conv().kernel()) {
    throw ShapeError(name_ + ": input " + x.shape_string() + " smaller than kernel");
  }
  Tensor<T> mid = first_.forward(ctx, x, cache ? &cache->first : nullptr);
  Tensor<T> out = second_.forward(ctx, mid, cache ? &cache->second : nullptr);
  if (!all_finite(out)) throw NumericalError("non-finite activation in " + name_);
  return out;
}

template <typename T>
void ConvBlock<T>::backward(const BackwardContext<T>& ctx, const Tensor<T>& x, const Cache& cache,
                            const Tensor<T>& dy, Tensor<T>* dx) const {
  Tensor<T> dmid;
  second_.backward(ctx, cache.first.out, cache.second, dy, &dmid);
  first_.backward(ctx, x, cache.first, dmid, dx);
}

template <typename T>
UpConvBlock<T>::UpConvBlock(ParamSet<T>& weights, ParamSet<T>& stats, const std::string& name,
                            int in_channels, int skip_channels, int filters, int kernel)
    : skip_channels_(skip_channels),
      up_(weights, stats, name + ".up", in_channels, filters, 2),
      block_(weights, stats, name + ".block", filters + skip_channels, filters, kernel) {}

template <typename T>
Tensor<T> UpConvBlock<T>::forward(const ForwardContext<T>& ctx, const Tensor<T>& x, const Tensor<T>& skip,
                                  Cache* cache) const {
  if (skip.n() != x.n() || skip.h() != 2 * x.h() || skip.w() != 2 * x.w() || skip.c() != skip_channels_) {
    throw ShapeError("upconv skip " + skip.shape_string() + " does not match input " + x.shape_string());
  }
  Tensor<T> up = up_.forward(ctx, upsample2x(x), cache ? &cache->up : nullptr);
  Tensor<T> cat = concat_channels(up, skip);
  Tensor<T> out = block_.forward(ctx, cat, cache ? &cache->block : nullptr);
  if (cache) cache->concat = std::move(cat);
  return out;
}

template <typename T>
void UpConvBlock<T>::backward(const BackwardContext<T>& ctx, const Tensor<T>& x, const Cache& cache,
                              const Tensor<T>& dy, Tensor<T>& dx, Tensor<T>& dskip) const {
  Tensor<T> dcat;
  block_.backward(ctx, cache.concat, cache.block, dy, &dcat);
  const int n_up = cache.up.out.c();
  Tensor<T> dup(dcat.n(), n_up, dcat.h(), dcat.w());
  const std::size_t hw = dcat.plane_size();
  for (int n = 0; n < dcat.n(); ++n) {
    std::copy(dcat.plane(n, 0), dcat.plane(n, 0) + n_up * hw, dup.plane(n, 0));
    T* ds = dskip.plane(n, 0);
    const T* src = dcat.plane(n, n_up);
    for (std::size_t i = 0; i < skip_channels_ * hw; ++i) ds[i] += src[i];
  }
  Tensor<T> dup_in;
  up_.backward(ctx, upsample2x(x), cache.up, dup, &dup_in);
  dx = upsample2x_backward(dup_in);
}

// ---------------------------------------------------------------------------
// Stateless ops

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), 2 * x.h(), 2 * x.w());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.plane(n, c);
      T* dst = y.plane(n, c);
      const int w2 = 2 * x.w();
      for (int yy = 0; yy < 2 * x.h(); ++yy) {
        const T* s = src + static_cast<std::size_t>(yy / 2) * x.w();
        T* d = dst + static_cast<std::size_t>(yy) * w2;
        for (int xx = 0; xx < w2; ++xx) d[xx] = s[xx / 2];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.n(), dy.c(), dy.h() / 2, dy.w() / 2);
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      for (int y = 0; y < dy.h(); ++y) {
        for (int x = 0; x < dy.w(); ++x) dx(n, c, y / 2, x / 2) += dy(n, c, y, x);
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("cannot concatenate " + a.shape_string() + " and " + b.shape_string());
  }
  Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
  const std::size_t hw = a.plane_size();
  for (int n = 0; n < a.n(); ++n) {
    std::copy(a.sample(n), a.sample(n) + a.c() * hw, out.plane(n, 0));
    std::copy(b.sample(n), b.sample(n) + b.c() * hw, out.plane(n, a.c()));
  }
  return out;
}

template <typename T>
Tensor<T> max_pool2x(const Tensor<T>& x, PoolIndices* indices) {
  if (x.h() % 2 != 0 || x.w() % 2 != 0) throw ShapeError("max pool needs even dims, got " + x.shape_string());
  Tensor<T> y(x.n(), x.c(), x.h() / 2, x.w() / 2);
  if (indices) indices->argmax.assign(y.size(), 0);
  std::size_t k = 0;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int yy = 0; yy < y.h(); ++yy) {
        for (int xx = 0; xx < y.w(); ++xx, ++k) {
          std::uint8_t best = 0;
          T v = x(n, c, 2 * yy, 2 * xx);
          for (std::uint8_t j = 1; j < 4; ++j) {
            const T u = x(n, c, 2 * yy + j / 2, 2 * xx + j % 2);
            if (u > v) {
              v = u;
              best = j;
            }
          }
          y(n, c, yy, xx) = v;
          if (indices) indices->argmax[k] = best;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> max_pool2x_backward(const Tensor<T>& dy, const PoolIndices& indices) {
  Tensor<T> dx(dy.n(), dy.c(), dy.h() * 2, dy.w() * 2);
  std::size_t k = 0;
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      for (int yy = 0; yy < dy.h(); ++yy) {
        for (int xx = 0; xx < dy.w(); ++xx, ++k) {
          const int j = indices.argmax[k];
          dx(n, c, 2 * yy + j / 2, 2 * xx + j % 2) = dy(n, c, yy, xx);
        }
      }
    }
  }
  return dx;
}

template <typename T>
void sigmoid_inplace(Tensor<T>& x) {
  for (auto& v : x.values()) v = T(1) / (T(1) + std::exp(-v));
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.values().begin(), x.values().end(), [](T v) { return std::isfinite(v); });
}

#define GLANDSEG_INSTANTIATE_LAYERS(T)                                           \
  template class Conv2d<T>;                                                      \
  template class BatchNorm<T>;                                                   \
  template class ConvUnit<T>;                                                    \
  template class ConvBlock<T>;                                                   \
  template class UpConvBlock<T>;                                                 \
  template Tensor<T> upsample2x(const Tensor<T>&);                               \
  template Tensor<T> upsample2x_backward(const Tensor<T>&);                      \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> max_pool2x(const Tensor<T>&, PoolIndices*);                 \
  template Tensor<T> max_pool2x_backward(const Tensor<T>&, const PoolIndices&);  \
  template void sigmoid_inplace(Tensor<T>&);                                     \
  template bool all_finite(const Tensor<T>&);

GLANDSEG_INSTANTIATE_LAYERS(float)
GLANDSEG_INSTANTIATE_LAYERS(double)

#undef GLANDSEG_INSTANTIATE_LAYERS

}  // namespace glandseg
