#include "stda/ops.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <limits>

namespace stda::ops {

namespace {

thread_local int64_t g_macs = 0;

void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda, const float* b, int ldb,
          float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a,
              lda, b, ldb, beta, c, ldc);
}

void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
          int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a,
              lda, b, ldb, beta, c, ldc);
}

void same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, ErrorCode::kShape, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Elementwise map whose derivative is expressed through input x and output y.
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  return make_result<T>(std::move(y), {a}, [df](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    const auto& x = self.parents[0]->value;
    auto& gx = self.parent_grad(0);
    for (int64_t i = 0; i < x.numel(); ++i) gx[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

template <typename T>
void im2col(const T* img, int c, int h, int w, int k, int stride, int pad, int oh, int ow, T* col) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + ((static_cast<int64_t>(ci) * k + ky) * k + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * ow, row + (oy + 1) * ow, T(0));
            continue;
          }
          const T* src = img + (static_cast<int64_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            row[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int c, int h, int w, int k, int stride, int pad, int oh, int ow, T* img) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + ((static_cast<int64_t>(ci) * k + ky) * k + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (static_cast<int64_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

struct ConvGeom {
  int n, c, h, w, o, k, oh, ow;
};

template <typename T>
ConvGeom conv_geom(const Tensor<T>& x, const Tensor<T>& w, const Conv2dSpec& spec) {
  require(x.rank() == 4 && w.rank() == 4, ErrorCode::kShape,
          "conv2d: expected 4-d input and weight, got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  ConvGeom g{};
  g.n = static_cast<int>(x.dim(0));
  g.c = static_cast<int>(x.dim(1));
  g.h = static_cast<int>(x.dim(2));
  g.w = static_cast<int>(x.dim(3));
  g.o = static_cast<int>(w.dim(0));
  g.k = static_cast<int>(w.dim(2));
  require(w.dim(3) == g.k, ErrorCode::kShape, "conv2d: kernel must be square");
  if (spec.groups == 1) {
    require(w.dim(1) == g.c, ErrorCode::kShape,
            "conv2d: weight " + shape_str(w.shape()) + " does not accept " + std::to_string(g.c) + " channels");
  } else {
    require(spec.groups == g.c && g.o == g.c && w.dim(1) == 1, ErrorCode::kShape,
            "conv2d: only dense or depthwise grouping is supported");
  }
  g.oh = (g.h + 2 * spec.padding - g.k) / spec.stride + 1;
  g.ow = (g.w + 2 * spec.padding - g.k) / spec.stride + 1;
  require(g.oh > 0 && g.ow > 0, ErrorCode::kShape, "conv2d: input smaller than kernel");
  return g;
}

template <typename T>
Var<T> conv2d_dense(const Var<T>& xv, const Var<T>& wv, Conv2dSpec spec) {
  const auto& x = xv.value();
  const auto& w = wv.value();
  const ConvGeom g = conv_geom(x, w, spec);
  const int ckk = g.c * g.k * g.k;
  const int p = g.oh * g.ow;
  const bool direct = g.k == 1 && spec.stride == 1 && spec.padding == 0;
  Tensor<T> y({g.n, g.o, g.oh, g.ow});
  std::vector<T> col(direct ? 0 : static_cast<size_t>(ckk) * p);
  for (int n = 0; n < g.n; ++n) {
    const T* img = x.data() + static_cast<int64_t>(n) * g.c * g.h * g.w;
    const T* src = img;
    if (!direct) {
      im2col(img, g.c, g.h, g.w, g.k, spec.stride, spec.padding, g.oh, g.ow, col.data());
      src = col.data();
    }
    gemm(false, false, g.o, p, ckk, T(1), w.data(), ckk, src, p, T(0), y.data() + static_cast<int64_t>(n) * g.o * p,
         p);
  }
  MacCounter::add(static_cast<int64_t>(g.n) * g.o * p * ckk);
  return make_result<T>(std::move(y), {xv, wv}, [g, spec, direct](Node<T>& self) {
    const int ckk = g.c * g.k * g.k;
    const int p = g.oh * g.ow;
    const auto& x = self.parents[0]->value;
    const auto& w = self.parents[1]->value;
    const bool need_x = self.parent_needs_grad(0);
    const bool need_w = self.parent_needs_grad(1);
    std::vector<T> col(direct ? 0 : static_cast<size_t>(ckk) * p);
    std::vector<T> dcol(direct ? 0 : static_cast<size_t>(ckk) * p);
    for (int n = 0; n < g.n; ++n) {
      const T* img = x.data() + static_cast<int64_t>(n) * g.c * g.h * g.w;
      const T* dy = self.grad.data() + static_cast<int64_t>(n) * g.o * p;
      if (need_w) {
        const T* src = img;
        if (!direct) {
          im2col(img, g.c, g.h, g.w, g.k, spec.stride, spec.padding, g.oh, g.ow, col.data());
          src = col.data();
        }
        gemm(false, true, g.o, ckk, p, T(1), dy, p, src, p, T(1), self.parent_grad(1).data(), ckk);
      }
      if (need_x) {
        T* dimg = self.parent_grad(0).data() + static_cast<int64_t>(n) * g.c * g.h * g.w;
        if (direct) {
          gemm(true, false, ckk, p, g.o, T(1), w.data(), ckk, dy, p, T(1), dimg, p);
        } else {
          gemm(true, false, ckk, p, g.o, T(1), w.data(), ckk, dy, p, T(0), dcol.data(), p);
          col2im(dcol.data(), g.c, g.h, g.w, g.k, spec.stride, spec.padding, g.oh, g.ow, dimg);
        }
      }
    }
  });
}

template <typename T>
Var<T> conv2d_depthwise(const Var<T>& xv, const Var<T>& wv, Conv2dSpec spec) {
  const auto& x = xv.value();
  const auto& w = wv.value();
  const ConvGeom g = conv_geom(x, w, spec);
  Tensor<T> y({g.n, g.c, g.oh, g.ow});
  const int s = spec.stride;
  const int pad = spec.padding;
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.c; ++c) {
      const T* img = x.data() + (static_cast<int64_t>(n) * g.c + c) * g.h * g.w;
      const T* ker = w.data() + static_cast<int64_t>(c) * g.k * g.k;
      T* out = y.data() + (static_cast<int64_t>(n) * g.c + c) * g.oh * g.ow;
      for (int oy = 0; oy < g.oh; ++oy) {
        for (int ox = 0; ox < g.ow; ++ox) {
          T acc = T(0);
          for (int ky = 0; ky < g.k; ++ky) {
            int iy = oy * s - pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (int kx = 0; kx < g.k; ++kx) {
              int ix = ox * s - pad + kx;
              if (ix < 0 || ix >= g.w) continue;
              acc += img[iy * g.w + ix] * ker[ky * g.k + kx];
            }
          }
          out[oy * g.ow + ox] = acc;
        }
      }
    }
  }
  MacCounter::add(static_cast<int64_t>(g.n) * g.c * g.oh * g.ow * g.k * g.k);
  return make_result<T>(std::move(y), {xv, wv}, [g, s, pad](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    const auto& w = self.parents[1]->value;
    const bool need_x = self.parent_needs_grad(0);
    const bool need_w = self.parent_needs_grad(1);
    T* dx = need_x ? self.parent_grad(0).data() : nullptr;
    T* dw = need_w ? self.parent_grad(1).data() : nullptr;
    for (int n = 0; n < g.n; ++n) {
      for (int c = 0; c < g.c; ++c) {
        const int64_t img_off = (static_cast<int64_t>(n) * g.c + c) * g.h * g.w;
        const T* img = x.data() + img_off;
        const T* ker = w.data() + static_cast<int64_t>(c) * g.k * g.k;
        const T* dy = self.grad.data() + (static_cast<int64_t>(n) * g.c + c) * g.oh * g.ow;
        for (int oy = 0; oy < g.oh; ++oy) {
          for (int ox = 0; ox < g.ow; ++ox) {
            const T go = dy[oy * g.ow + ox];
            if (go == T(0)) continue;
            for (int ky = 0; ky < g.k; ++ky) {
              int iy = oy * s - pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (int kx = 0; kx < g.k; ++kx) {
                int ix = ox * s - pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                if (dw) dw[static_cast<int64_t>(c) * g.k * g.k + ky * g.k + kx] += go * img[iy * g.w + ix];
                if (dx) dx[img_off + iy * g.w + ix] += go * ker[ky * g.k + kx];
              }
            }
          }
        }
      }
    }
  });
}

// Splits a tensor shaped N x C x rest into (N, C, inner) extents.
struct ChannelGeom {
  int64_t n, c, inner;
};

ChannelGeom channel_geom(const Shape& s) {
  require(s.size() >= 2, ErrorCode::kShape, "expected at least 2 axes, got " + shape_str(s));
  int64_t inner = 1;
  for (size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

}  // namespace

int64_t MacCounter::value() { return g_macs; }
void MacCounter::reset() { g_macs = 0; }
void MacCounter::add(int64_t macs) { g_macs += macs; }

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    for (size_t p = 0; p < 2; ++p) {
      if (!self.parent_needs_grad(p)) continue;
      auto& g = self.parent_grad(p);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    if (self.parent_needs_grad(0)) {
      auto& g = self.parent_grad(0);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& g = self.parent_grad(1);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.parent_needs_grad(0)) {
      auto& g = self.parent_grad(0);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& g = self.parent_grad(1);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> one_minus(const Var<T>& a) {
  return unary<T>(a, [](T x) { return T(1) - x; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul_scalar_var(const Var<T>& a, const Var<T>& s) {
  require(s.numel() == 1, ErrorCode::kShape, "mul_scalar_var: gain must have one element");
  const T sv = s.value()[0];
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * sv;
  return make_result<T>(std::move(y), {a, s}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const T sv = self.parents[1]->value[0];
    if (self.parent_needs_grad(0)) {
      auto& g = self.parent_grad(0);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * sv;
    }
    if (self.parent_needs_grad(1)) {
      T acc = T(0);
      for (int64_t i = 0; i < av.numel(); ++i) acc += self.grad[i] * av[i];
      self.parent_grad(1)[0] += acc;
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary<T>(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> relu6(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return std::clamp(x, T(0), T(6)); },
      [](T x, T) { return (x > T(0) && x < T(6)) ? T(1) : T(0); });
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
  const auto g = channel_geom(x.shape());
  require(bias.numel() == g.c, ErrorCode::kShape,
          "add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  const auto& bv = bias.value();
  for (int64_t n = 0; n < g.n; ++n)
    for (int64_t c = 0; c < g.c; ++c) {
      const int64_t off = (n * g.c + c) * g.inner;
      for (int64_t i = 0; i < g.inner; ++i) y[off + i] = xv[off + i] + bv[c];
    }
  return make_result<T>(std::move(y), {x, bias}, [g](Node<T>& self) {
    if (self.parent_needs_grad(0)) {
      auto& gx = self.parent_grad(0);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& gb = self.parent_grad(1);
      for (int64_t n = 0; n < g.n; ++n)
        for (int64_t c = 0; c < g.c; ++c) {
          const int64_t off = (n * g.c + c) * g.inner;
          T acc = T(0);
          for (int64_t i = 0; i < g.inner; ++i) acc += self.grad[off + i];
          gb[c] += acc;
        }
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Conv2dSpec spec) {
  require(spec.stride >= 1 && spec.padding >= 0 && spec.groups >= 1, ErrorCode::kValue, "conv2d: bad spec");
  if (spec.groups == 1) return conv2d_dense(x, w, spec);
  return conv2d_depthwise(x, w, spec);
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, NormMode mode, T momentum, T eps) {
  if (mode == NormMode::kIdentity) {
    return unary<T>(x, [](T v) { return v; }, [](T, T) { return T(1); });
  }
  const auto g = channel_geom(x.shape());
  require(gamma.numel() == g.c && beta.numel() == g.c && running_mean.numel() == g.c && running_var.numel() == g.c,
          ErrorCode::kShape, "batch_norm: parameter size does not match " + std::to_string(g.c) + " channels");
  const int64_t m = g.n * g.inner;
  const auto& xv = x.value();
  Tensor<T> mean({g.c}), invstd({g.c});
  if (mode == NormMode::kTrain) {
    for (int64_t c = 0; c < g.c; ++c) {
      double s = 0;
      for (int64_t n = 0; n < g.n; ++n) {
        const T* p = xv.data() + (n * g.c + c) * g.inner;
        for (int64_t i = 0; i < g.inner; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      double v = 0;
      for (int64_t n = 0; n < g.n; ++n) {
        const T* p = xv.data() + (n * g.c + c) * g.inner;
        for (int64_t i = 0; i < g.inner; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / static_cast<double>(m);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var;
      running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * mu);
      running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
    }
  } else {
    for (int64_t c = 0; c < g.c; ++c) {
      mean[c] = running_mean[c];
      invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor<T> xhat(x.shape()), y(x.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (int64_t n = 0; n < g.n; ++n)
    for (int64_t c = 0; c < g.c; ++c) {
      const int64_t off = (n * g.c + c) * g.inner;
      for (int64_t i = 0; i < g.inner; ++i) {
        const T h = (xv[off + i] - mean[c]) * invstd[c];
        xhat[off + i] = h;
        y[off + i] = gv[c] * h + bv[c];
      }
    }
  const bool train = mode == NormMode::kTrain;
  return make_result<T>(std::move(y), {x, gamma, beta},
                        [g, m, train, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& self) {
    const auto& gv = self.parents[1]->value;
    for (int64_t c = 0; c < g.c; ++c) {
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (int64_t n = 0; n < g.n; ++n) {
        const int64_t off = (n * g.c + c) * g.inner;
        for (int64_t i = 0; i < g.inner; ++i) {
          sum_dy += self.grad[off + i];
          sum_dy_xhat += self.grad[off + i] * xhat[off + i];
        }
      }
      if (self.parent_needs_grad(1)) self.parent_grad(1)[c] += sum_dy_xhat;
      if (self.parent_needs_grad(2)) self.parent_grad(2)[c] += sum_dy;
      if (!self.parent_needs_grad(0)) continue;
      auto& gx = self.parent_grad(0);
      const T k = gv[c] * invstd[c];
      const T mt = static_cast<T>(m);
      for (int64_t n = 0; n < g.n; ++n) {
        const int64_t off = (n * g.c + c) * g.inner;
        for (int64_t i = 0; i < g.inner; ++i) {
          if (train) {
            gx[off + i] += k * (self.grad[off + i] - sum_dy / mt - xhat[off + i] * sum_dy_xhat / mt);
          } else {
            gx[off + i] += k * self.grad[off + i];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& xv, int kernel, int stride, int padding) {
  const auto& x = xv.value();
  require(x.rank() == 4, ErrorCode::kShape, "max_pool2d: expected 4-d input");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = (h + 2 * padding - kernel) / stride + 1;
  const int64_t ow = (w + 2 * padding - kernel) / stride + 1;
  require(oh > 0 && ow > 0, ErrorCode::kShape, "max_pool2d: input too small");
  Tensor<T> y({n, c, oh, ow});
  std::vector<int64_t> arg(static_cast<size_t>(y.numel()));
  for (int64_t p = 0; p < n * c; ++p) {
    const T* img = x.data() + p * h * w;
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        int64_t best_i = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const int64_t iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int64_t ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            if (img[iy * w + ix] > best || best_i < 0) {
              best = img[iy * w + ix];
              best_i = iy * w + ix;
            }
          }
        }
        const int64_t o = (p * oh + oy) * ow + ox;
        y[o] = best;
        arg[static_cast<size_t>(o)] = p * h * w + best_i;
      }
  }
  return make_result<T>(std::move(y), {xv}, [arg = std::move(arg)](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += self.grad[static_cast<int64_t>(o)];
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& xv) {
  const auto g = channel_geom(xv.shape());
  Tensor<T> y({g.n, g.c});
  const auto& x = xv.value();
  for (int64_t p = 0; p < g.n * g.c; ++p) {
    T acc = T(0);
    for (int64_t i = 0; i < g.inner; ++i) acc += x[p * g.inner + i];
    y[p] = acc / static_cast<T>(g.inner);
  }
  return make_result<T>(std::move(y), {xv}, [g](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (int64_t p = 0; p < g.n * g.c; ++p) {
      const T d = self.grad[p] / static_cast<T>(g.inner);
      for (int64_t i = 0; i < g.inner; ++i) gx[p * g.inner + i] += d;
    }
  });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& xv, int factor) {
  const auto& x = xv.value();
  require(x.rank() == 4 && factor >= 1, ErrorCode::kShape, "upsample_nearest: expected 4-d input, factor >= 1");
  const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = h * factor, ow = w * factor;
  Tensor<T> y({x.dim(0), x.dim(1), oh, ow});
  for (int64_t p = 0; p < nc; ++p)
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) y[(p * oh + oy) * ow + ox] = x[(p * h + oy / factor) * w + ox / factor];
  return make_result<T>(std::move(y), {xv}, [nc, h, w, oh, ow, factor](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (int64_t p = 0; p < nc; ++p)
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox)
          gx[(p * h + oy / factor) * w + ox / factor] += self.grad[(p * oh + oy) * ow + ox];
  });
}

template <typename T>
Var<T> avg_pool(const Var<T>& xv, int factor) {
  const auto& x = xv.value();
  require(x.rank() == 4 && factor >= 1, ErrorCode::kShape, "avg_pool: expected 4-d input, factor >= 1");
  require(x.dim(2) % factor == 0 && x.dim(3) % factor == 0, ErrorCode::kShape,
          "avg_pool: spatial size " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
  const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = h / factor, ow = w / factor;
  const T inv = T(1) / static_cast<T>(factor * factor);
  Tensor<T> y({x.dim(0), x.dim(1), oh, ow});
  for (int64_t p = 0; p < nc; ++p)
    for (int64_t iy = 0; iy < h; ++iy)
      for (int64_t ix = 0; ix < w; ++ix) y[(p * oh + iy / factor) * ow + ix / factor] += x[(p * h + iy) * w + ix] * inv;
  return make_result<T>(std::move(y), {xv}, [nc, h, w, oh, ow, factor, inv](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (int64_t p = 0; p < nc; ++p)
      for (int64_t iy = 0; iy < h; ++iy)
        for (int64_t ix = 0; ix < w; ++ix)
          gx[(p * h + iy) * w + ix] += self.grad[(p * oh + iy / factor) * ow + ix / factor] * inv;
  });
}

template <typename T>
Var<T> linear(const Var<T>& xv, const Var<T>& wv) {
  const auto& x = xv.value();
  const auto& w = wv.value();
  require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1), ErrorCode::kShape,
          "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int m = static_cast<int>(x.dim(0)), k = static_cast<int>(x.dim(1)), o = static_cast<int>(w.dim(0));
  Tensor<T> y({m, o});
  gemm(false, true, m, o, k, T(1), x.data(), k, w.data(), k, T(0), y.data(), o);
  MacCounter::add(static_cast<int64_t>(m) * o * k);
  return make_result<T>(std::move(y), {xv, wv}, [m, k, o](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    const auto& w = self.parents[1]->value;
    if (self.parent_needs_grad(0))
      gemm(false, false, m, k, o, T(1), self.grad.data(), o, w.data(), k, T(1), self.parent_grad(0).data(), k);
    if (self.parent_needs_grad(1))
      gemm(true, false, o, k, m, T(1), self.grad.data(), o, x.data(), k, T(1), self.parent_grad(1).data(), k);
  });
}

template <typename T>
Var<T> bmm(const Var<T>& av, const Var<T>& bv, bool trans_a, bool trans_b) {
  const auto& a = av.value();
  const auto& b = bv.value();
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), ErrorCode::kShape,
          "bmm: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int batch = static_cast<int>(a.dim(0));
  const int m = static_cast<int>(trans_a ? a.dim(2) : a.dim(1));
  const int k = static_cast<int>(trans_a ? a.dim(1) : a.dim(2));
  const int kb = static_cast<int>(trans_b ? b.dim(2) : b.dim(1));
  const int n = static_cast<int>(trans_b ? b.dim(1) : b.dim(2));
  require(k == kb, ErrorCode::kShape, "bmm: inner dimensions differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int lda = static_cast<int>(a.dim(2)), ldb = static_cast<int>(b.dim(2));
  Tensor<T> y({batch, m, n});
  const int64_t sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2), sy = static_cast<int64_t>(m) * n;
  for (int i = 0; i < batch; ++i)
    gemm(trans_a, trans_b, m, n, k, T(1), a.data() + i * sa, lda, b.data() + i * sb, ldb, T(0), y.data() + i * sy, n);
  MacCounter::add(static_cast<int64_t>(batch) * m * n * k);
  return make_result<T>(std::move(y), {av, bv}, [=](Node<T>& self) {
    const auto& a = self.parents[0]->value;
    const auto& b = self.parents[1]->value;
    for (int i = 0; i < batch; ++i) {
      const T* dy = self.grad.data() + i * sy;
      if (self.parent_needs_grad(0)) {
        T* da = self.parent_grad(0).data() + i * sa;
        // Y = op(A) op(B); dop(A) = dY op(B)^T
        if (!trans_a)
          gemm(false, !trans_b, m, k, n, T(1), dy, n, b.data() + i * sb, ldb, T(1), da, lda);
        else
          gemm(trans_b, true, k, m, n, T(1), b.data() + i * sb, ldb, dy, n, T(1), da, lda);
      }
      if (self.parent_needs_grad(1)) {
        T* db = self.parent_grad(1).data() + i * sb;
        // dop(B) = op(A)^T dY
        if (!trans_b)
          gemm(!trans_a, false, k, n, m, T(1), a.data() + i * sa, lda, dy, n, T(1), db, ldb);
        else
          gemm(true, trans_a, n, k, m, T(1), dy, n, a.data() + i * sa, lda, T(1), db, ldb);
      }
    }
  });
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& xv) {
  const auto& x = xv.value();
  require(x.rank() >= 1, ErrorCode::kShape, "softmax: empty shape");
  const int64_t d = x.dim(-1);
  const int64_t rows = x.numel() / d;
  Tensor<T> y(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * d;
    T* dst = y.data() + r * d;
    const T mx = *std::max_element(src, src + d);
    T s = T(0);
    for (int64_t i = 0; i < d; ++i) {
      dst[i] = std::exp(src[i] - mx);
      s += dst[i];
    }
    for (int64_t i = 0; i < d; ++i) dst[i] /= s;
  }
  return make_result<T>(std::move(y), {xv}, [rows, d](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (int64_t r = 0; r < rows; ++r) {
      const T* yr = self.value.data() + r * d;
      const T* gr = self.grad.data() + r * d;
      T dot = T(0);
      for (int64_t i = 0; i < d; ++i) dot += yr[i] * gr[i];
      for (int64_t i = 0; i < d; ++i) gx[r * d + i] += yr[i] * (gr[i] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm_lastdim(const Var<T>& xv, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const auto& x = xv.value();
  const int64_t d = x.dim(-1);
  require(gamma.numel() == d && beta.numel() == d, ErrorCode::kShape, "layer_norm: parameter size mismatch");
  const int64_t rows = x.numel() / d;
  Tensor<T> y(x.shape()), xhat(x.shape());
  std::vector<T> invstd(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * d;
    T mu = T(0);
    for (int64_t i = 0; i < d; ++i) mu += src[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int64_t i = 0; i < d; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    invstd[static_cast<size_t>(r)] = is;
    for (int64_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (src[i] - mu) * is;
      y[r * d + i] = gamma.value()[i] * xhat[r * d + i] + beta.value()[i];
    }
  }
  return make_result<T>(std::move(y), {xv, gamma, beta},
                        [rows, d, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& self) {
    const auto& gv = self.parents[1]->value;
    for (int64_t r = 0; r < rows; ++r) {
      const T* gr = self.grad.data() + r * d;
      const T* hr = xhat.data() + r * d;
      if (self.parent_needs_grad(1)) {
        auto& gg = self.parent_grad(1);
        for (int64_t i = 0; i < d; ++i) gg[i] += gr[i] * hr[i];
      }
      if (self.parent_needs_grad(2)) {
        auto& gb = self.parent_grad(2);
        for (int64_t i = 0; i < d; ++i) gb[i] += gr[i];
      }
      if (!self.parent_needs_grad(0)) continue;
      T s1 = T(0), s2 = T(0);
      for (int64_t i = 0; i < d; ++i) {
        const T dh = gr[i] * gv[i];
        s1 += dh;
        s2 += dh * hr[i];
      }
      auto& gx = self.parent_grad(0);
      const T is = invstd[static_cast<size_t>(r)];
      const T dt = static_cast<T>(d);
      for (int64_t i = 0; i < d; ++i) gx[r * d + i] += is * (gr[i] * gv[i] - s1 / dt - hr[i] * s2 / dt);
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(y), {x}, [](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Var<T> permute(const Var<T>& xv, const std::vector<int>& perm) {
  const auto& x = xv.value();
  const int r = x.rank();
  require(static_cast<int>(perm.size()) == r, ErrorCode::kShape, "permute: rank mismatch");
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.dim(i + 1);
  Shape out_shape(static_cast<size_t>(r));
  std::vector<int64_t> src_strides(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    src_strides[i] = in_strides[perm[i]];
  }
  // Gather index for every output element.
  std::vector<int64_t> index(static_cast<size_t>(x.numel()));
  std::vector<int64_t> counter(static_cast<size_t>(r), 0);
  int64_t src = 0;
  for (int64_t o = 0; o < x.numel(); ++o) {
    index[static_cast<size_t>(o)] = src;
    for (int ax = r - 1; ax >= 0; --ax) {
      if (++counter[ax] < out_shape[ax]) {
        src += src_strides[ax];
        break;
      }
      src -= src_strides[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  Tensor<T> y(out_shape);
  for (int64_t o = 0; o < y.numel(); ++o) y[o] = x[index[static_cast<size_t>(o)]];
  return make_result<T>(std::move(y), {xv}, [index = std::move(index)](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (size_t o = 0; o < index.size(); ++o) gx[index[o]] += self.grad[static_cast<int64_t>(o)];
  });
}

template <typename T>
Var<T> select_axis1(const Var<T>& xv, int64_t index) {
  const auto& x = xv.value();
  require(x.rank() >= 2 && index >= 0 && index < x.dim(1), ErrorCode::kShape, "select_axis1: index out of range");
  const int64_t n = x.dim(0), t = x.dim(1), inner = x.numel() / (n * t);
  Shape shape{n};
  for (int i = 2; i < x.rank(); ++i) shape.push_back(x.dim(i));
  Tensor<T> y(shape);
  for (int64_t b = 0; b < n; ++b)
    std::copy_n(x.data() + (b * t + index) * inner, inner, y.data() + b * inner);
  return make_result<T>(std::move(y), {xv}, [n, t, inner, index](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t i = 0; i < inner; ++i) gx[(b * t + index) * inner + i] += self.grad[b * inner + i];
  });
}

template <typename T>
Var<T> stack_axis1(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorCode::kShape, "stack_axis1: nothing to stack");
  const Shape& s0 = parts[0].shape();
  for (const auto& p : parts) same_shape(p.shape(), s0, "stack_axis1");
  const int64_t n = s0.at(0), t = static_cast<int64_t>(parts.size()), inner = shape_numel(s0) / n;
  Shape shape{n, t};
  for (size_t i = 1; i < s0.size(); ++i) shape.push_back(s0[i]);
  Tensor<T> y(shape);
  for (int64_t k = 0; k < t; ++k)
    for (int64_t b = 0; b < n; ++b)
      std::copy_n(parts[k].value().data() + b * inner, inner, y.data() + (b * t + k) * inner);
  return make_result<T>(std::move(y), parts, [n, t, inner](Node<T>& self) {
    for (int64_t k = 0; k < t; ++k) {
      if (!self.parent_needs_grad(static_cast<size_t>(k))) continue;
      auto& gp = self.parent_grad(static_cast<size_t>(k));
      for (int64_t b = 0; b < n; ++b)
        for (int64_t i = 0; i < inner; ++i) gp[b * inner + i] += self.grad[(b * t + k) * inner + i];
    }
  });
}

template <typename T>
Var<T> repeat_channels(const Var<T>& xv, int64_t channels) {
  const auto g = channel_geom(xv.shape());
  require(g.c == 1, ErrorCode::kShape, "repeat_channels: expected a single channel, got " + shape_str(xv.shape()));
  Shape shape = xv.shape();
  shape[1] = channels;
  Tensor<T> y(shape);
  for (int64_t n = 0; n < g.n; ++n)
    for (int64_t c = 0; c < channels; ++c)
      std::copy_n(xv.value().data() + n * g.inner, g.inner, y.data() + (n * channels + c) * g.inner);
  return make_result<T>(std::move(y), {xv}, [g, channels](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (int64_t n = 0; n < g.n; ++n)
      for (int64_t c = 0; c < channels; ++c)
        for (int64_t i = 0; i < g.inner; ++i) gx[n * g.inner + i] += self.grad[(n * channels + c) * g.inner + i];
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& xv) {
  T acc = T(0);
  for (T v : xv.value().span()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc), {xv}, [](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    auto& gx = self.parent_grad(0);
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[0];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& xv) {
  return scale(sum_all(xv), T(1) / static_cast<T>(xv.numel()));
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
  same_shape(logits.shape(), targets.shape(), "bce_with_logits");
  const auto& z = logits.value();
  double acc = 0;
  for (int64_t i = 0; i < z.numel(); ++i) {
    // max(z,0) - z*t + log(1 + exp(-|z|))
    const T zi = z[i];
    acc += std::max(zi, T(0)) - zi * targets[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  const T n = static_cast<T>(z.numel());
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / n)), {logits}, [targets, n](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    const auto& z = self.parents[0]->value;
    auto& gz = self.parent_grad(0);
    for (int64_t i = 0; i < z.numel(); ++i) {
      const T s = z[i] >= T(0) ? T(1) / (T(1) + std::exp(-z[i])) : std::exp(z[i]) / (T(1) + std::exp(z[i]));
      gz[i] += self.grad[0] * (s - targets[i]) / n;
    }
  });
}

template <typename T>
Var<T> weighted_nll(const Var<T>& probs, const std::vector<int>& labels, const std::vector<T>& weights) {
  const auto& p = probs.value();
  require(p.rank() == 2, ErrorCode::kShape, "weighted_nll: expected B x N probabilities");
  const int64_t b = p.dim(0), nc = p.dim(1);
  require(static_cast<int64_t>(labels.size()) == b && static_cast<int64_t>(weights.size()) == b, ErrorCode::kShape,
          "weighted_nll: label/weight count does not match batch");
  const T floor = std::numeric_limits<T>::min();
  T acc = T(0);
  for (int64_t i = 0; i < b; ++i) {
    require(labels[i] >= 0 && labels[i] < nc, ErrorCode::kValue, "weighted_nll: label out of range");
    acc += -weights[i] * std::log(std::max(p[i * nc + labels[i]], floor));
  }
  return make_result<T>(Tensor<T>({1}, acc / static_cast<T>(b)), {probs}, [labels, weights, b, nc, floor](Node<T>& self) {
    if (!self.parent_needs_grad(0)) return;
    const auto& p = self.parents[0]->value;
    auto& gp = self.parent_grad(0);
    for (int64_t i = 0; i < b; ++i) {
      const int64_t j = i * nc + labels[i];
      gp[j] += -self.grad[0] * weights[i] / (std::max(p[j], floor) * static_cast<T>(b));
    }
  });
}

#define STDA_INSTANTIATE_OPS(T)                                                                              \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> scale(const Var<T>&, T);                                                                   \
  template Var<T> add_scalar(const Var<T>&, T);                                                              \
  template Var<T> mul_scalar_var(const Var<T>&, const Var<T>&);                                              \
  template Var<T> one_minus(const Var<T>&);                                                                  \
  template Var<T> sigmoid(const Var<T>&);                                                                    \
  template Var<T> tanh(const Var<T>&);                                                                       \
  template Var<T> relu(const Var<T>&);                                                                       \
  template Var<T> relu6(const Var<T>&);                                                                      \
  template Var<T> add_channel_bias(const Var<T>&, const Var<T>&);                                            \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, Conv2dSpec);                                          \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, NormMode, T, \
                             T);                                                                             \
  template Var<T> max_pool2d(const Var<T>&, int, int, int);                                                  \
  template Var<T> global_avg_pool(const Var<T>&);                                                            \
  template Var<T> upsample_nearest(const Var<T>&, int);                                                      \
  template Var<T> avg_pool(const Var<T>&, int);                                                              \
  template Var<T> linear(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> bmm(const Var<T>&, const Var<T>&, bool, bool);                                             \
  template Var<T> softmax_lastdim(const Var<T>&);                                                            \
  template Var<T> layer_norm_lastdim(const Var<T>&, const Var<T>&, const Var<T>&, T);                        \
  template Var<T> reshape(const Var<T>&, Shape);                                                             \
  template Var<T> permute(const Var<T>&, const std::vector<int>&);                                           \
  template Var<T> select_axis1(const Var<T>&, int64_t);                                                      \
  template Var<T> stack_axis1(const std::vector<Var<T>>&);                                                   \
  template Var<T> repeat_channels(const Var<T>&, int64_t);                                                   \
  template Var<T> sum_all(const Var<T>&);                                                                    \
  template Var<T> mean_all(const Var<T>&);                                                                   \
  template Var<T> bce_with_logits(const Var<T>&, const Tensor<T>&);                                          \
  template Var<T> weighted_nll(const Var<T>&, const std::vector<int>&, const std::vector<T>&);

STDA_INSTANTIATE_OPS(float)
STDA_INSTANTIATE_OPS(double)

}  // namespace stda::ops
