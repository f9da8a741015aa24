// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ddistill/error.hpp"
#include "ddistill/gemm.hpp"

// Dense forward/backward kernels over row-major buffers. Backward functions
// accumulate (+=) into parameter gradients and overwrite input gradients
// unless stated otherwise.
namespace ddistill::kernels {

inline constexpr double kNormEps = 1e-5;

// ---------------------------------------------------------------- linear

/// y[rows×out] = x[rows×in] · w[in×out] + b.
template <class T>
void linear_forward(int rows, int in, int out, const T* x, const T* w, const T* b, T* y) {
  gemm::nn(rows, out, in, x, in, w, out, y, out);
  if (b) {
    for (int r = 0; r < rows; ++r) {
      T* yr = y + static_cast<std::size_t>(r) * out;
      for (int j = 0; j < out; ++j) yr[j] += b[j];
    }
  }
}

/// dx = dy·wᵀ (skipped when dx is null); dw += xᵀ·dy; db += Σ_rows dy.
template <class T>
void linear_backward(int rows, int in, int out, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db,
                     bool accumulate_dx = false) {
  if (dx) gemm::nt(rows, in, out, dy, out, w, out, dx, in, accumulate_dx);
  if (dw) gemm::tn(in, out, rows, x, in, dy, out, dw, out, true);
  if (db) {
    for (int r = 0; r < rows; ++r) {
      const T* dr = dy + static_cast<std::size_t>(r) * out;
      for (int j = 0; j < out; ++j) db[j] += dr[j];
    }
  }
}

// ------------------------------------------------------------ layer norm

/// Per-row normalization over `dim` with affine gamma/beta. Stores mean and
/// reciprocal std per row for the backward pass.
template <class T>
void layer_norm_forward(int rows, int dim, const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::size_t>(r) * dim;
    T* yr = y + static_cast<std::size_t>(r) * dim;
    double mu = 0.0;
    for (int j = 0; j < dim; ++j) mu += xr[j];
    mu /= dim;
    double var = 0.0;
    for (int j = 0; j < dim; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= dim;
    const double rs = 1.0 / std::sqrt(var + kNormEps);
    mean[r] = static_cast<T>(mu);
    rstd[r] = static_cast<T>(rs);
    const T m = static_cast<T>(mu), s = static_cast<T>(rs);
    for (int j = 0; j < dim; ++j) yr[j] = (xr[j] - m) * s * gamma[j] + beta[j];
  }
}

template <class T>
void layer_norm_backward(int rows, int dim, const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy,
                         T* dx, T* dgamma, T* dbeta, bool accumulate_dx = false) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::size_t>(r) * dim;
    const T* dyr = dy + static_cast<std::size_t>(r) * dim;
    T* dxr = dx + static_cast<std::size_t>(r) * dim;
    const T m = mean[r], s = rstd[r];
    double sum_g = 0.0, sum_gx = 0.0;
    for (int j = 0; j < dim; ++j) {
      const T xhat = (xr[j] - m) * s;
      const T g = dyr[j] * gamma[j];
      sum_g += g;
      sum_gx += g * xhat;
      dgamma[j] += dyr[j] * xhat;
      dbeta[j] += dyr[j];
    }
    const T mg = static_cast<T>(sum_g / dim), mgx = static_cast<T>(sum_gx / dim);
    for (int j = 0; j < dim; ++j) {
      const T xhat = (xr[j] - m) * s;
      const T v = s * (dyr[j] * gamma[j] - mg - xhat * mgx);
      dxr[j] = accumulate_dx ? dxr[j] + v : v;
    }
  }
}

// ------------------------------------------------------------------ GELU

template <class T>
inline T gelu(T x) {
  // erfc keeps full relative precision in the negative tail
  return T(0.5) * x * std::erfc(-x * static_cast<T>(std::numbers::sqrt2 / 2));
}

template <class T>
inline T gelu_grad(T x) {
  const T cdf = T(0.5) * std::erfc(-x * static_cast<T>(std::numbers::sqrt2 / 2));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <class T>
void gelu_forward(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu(x[i]);
}

template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = dy[i] * gelu_grad(x[i]);
}

// --------------------------------------------------------------- softmax

/// Row-wise softmax with max subtraction.
template <class T>
void softmax_rows(int rows, int cols, const T* x, T* y) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::size_t>(r) * cols;
    T* yr = y + static_cast<std::size_t>(r) * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T sum = 0;
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

/// dx = p ⊙ (dy − Σ_j dy_j p_j), row-wise. dx may alias dy.
template <class T>
void softmax_rows_backward(int rows, int cols, const T* p, const T* dy, T* dx) {
  for (int r = 0; r < rows; ++r) {
    const T* pr = p + static_cast<std::size_t>(r) * cols;
    const T* dyr = dy + static_cast<std::size_t>(r) * cols;
    T* dxr = dx + static_cast<std::size_t>(r) * cols;
    T dot = 0;
    for (int j = 0; j < cols; ++j) dot += pr[j] * dyr[j];
    for (int j = 0; j < cols; ++j) dxr[j] = pr[j] * (dyr[j] - dot);
  }
}

// ------------------------------------------------------------- attention

/// Single-head scaled dot-product attention over strided row-major views.
///
/// q: n×d (ld lq), k: m×d (ld lk), v: m×dv (ld lv); out: n×dv (ld lo).
/// `probs` receives the n×m softmax weights (contiguous).
template <class T>
void attention_forward(int n, int m, int d, int dv, const T* q, int lq, const T* k, int lk, const T* v, int lv,
                       T* probs, T* out, int lo) {
  if (n <= 0 || m <= 0 || d <= 0 || dv <= 0) throw ConfigError("attention: empty dimension");
  gemm::nt(n, m, d, q, lq, k, lk, probs, m);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * m; ++i) probs[i] *= scale;
  softmax_rows(n, m, probs, probs);
  gemm::nn(n, dv, m, probs, m, v, lv, out, lo);
}

/// Gradients for attention_forward. `scratch` needs n·m elements. dq/dk/dv
/// are overwritten.
template <class T>
void attention_backward(int n, int m, int d, int dv, const T* q, int lq, const T* k, int lk, const T* v, int lv,
                        const T* probs, const T* dout, int ldo, T* dq, int ldq, T* dk, int ldk, T* dvv, int ldv,
                        T* scratch) {
  gemm::tn(m, dv, n, probs, m, dout, ldo, dvv, ldv);
  gemm::nt(n, m, dv, dout, ldo, v, lv, scratch, m);
  softmax_rows_backward(n, m, probs, scratch, scratch);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * m; ++i) scratch[i] *= scale;
  gemm::nn(n, d, m, scratch, m, k, lk, dq, ldq);
  gemm::tn(m, d, n, scratch, m, q, lq, dk, ldk);
}

/// Convenience overload on dense matrices (rows × cols vectors).
template <class T>
std::vector<T> attention(const std::vector<T>& q, const std::vector<T>& k, const std::vector<T>& v, int n, int m,
                         int d, int dv) {
  if (q.size() != static_cast<std::size_t>(n) * d || k.size() != static_cast<std::size_t>(m) * d ||
      v.size() != static_cast<std::size_t>(m) * dv) {
    throw ConfigError("attention: dimension mismatch");
  }
  std::vector<T> probs(static_cast<std::size_t>(n) * m), out(static_cast<std::size_t>(n) * dv);
  attention_forward(n, m, d, dv, q.data(), d, k.data(), d, v.data(), dv, probs.data(), out.data(), dv);
  return out;
}

// ----------------------------------------------------------- convolution

/// im2col for a 3×3-style square kernel with stride 1 and `pad` zero padding.
/// img: c×h×w; cols: (c·ks·ks) × (h·w) for output of same spatial size.
template <class T>
void im2col(int c, int h, int w, int ks, int pad, const T* img, T* cols) {
  const int hw = h * w;
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < ks; ++ky)
      for (int kx = 0; kx < ks; ++kx) {
        T* row = cols + static_cast<std::size_t>((ch * ks + ky) * ks + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int iy = y + ky - pad;
          for (int x = 0; x < w; ++x) {
            const int ix = x + kx - pad;
            row[y * w + x] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                 ? img[(static_cast<std::size_t>(ch) * h + iy) * w + ix]
                                 : T(0);
          }
        }
      }
}

template <class T>
void col2im(int c, int h, int w, int ks, int pad, const T* cols, T* img) {
  const int hw = h * w;
  std::fill(img, img + static_cast<std::size_t>(c) * hw, T(0));
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < ks; ++ky)
      for (int kx = 0; kx < ks; ++kx) {
        const T* row = cols + static_cast<std::size_t>((ch * ks + ky) * ks + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int x = 0; x < w; ++x) {
            const int ix = x + kx - pad;
            if (ix >= 0 && ix < w) img[(static_cast<std::size_t>(ch) * h + iy) * w + ix] += row[y * w + x];
          }
        }
      }
}

/// Same-size convolution of a batch. x: b×cin×h×w, weight: cout×(cin·ks·ks),
/// bias: cout, y: b×cout×h×w. `cols` caches b·(cin·ks²)·(h·w) for backward.
template <class T>
void conv2d_forward(int b, int cin, int cout, int h, int w, int ks, const T* x, const T* weight, const T* bias,
                    T* y, T* cols) {
  const int pad = ks / 2, hw = h * w, kdim = cin * ks * ks;
  for (int n = 0; n < b; ++n) {
    T* cn = cols + static_cast<std::size_t>(n) * kdim * hw;
    im2col(cin, h, w, ks, pad, x + static_cast<std::size_t>(n) * cin * hw, cn);
    T* yn = y + static_cast<std::size_t>(n) * cout * hw;
    gemm::nn(cout, hw, kdim, weight, kdim, cn, hw, yn, hw);
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < hw; ++i) yn[static_cast<std::size_t>(o) * hw + i] += bias[o];
  }
}

template <class T>
void conv2d_backward(int b, int cin, int cout, int h, int w, int ks, const T* cols, const T* weight, const T* dy,
                     T* dx, T* dweight, T* dbias) {
  const int pad = ks / 2, hw = h * w, kdim = cin * ks * ks;
  std::vector<T> dcols(dx ? static_cast<std::size_t>(kdim) * hw : 0);
  for (int n = 0; n < b; ++n) {
    const T* cn = cols + static_cast<std::size_t>(n) * kdim * hw;
    const T* dyn = dy + static_cast<std::size_t>(n) * cout * hw;
    gemm::nt(cout, kdim, hw, dyn, hw, cn, hw, dweight, kdim, true);
    for (int o = 0; o < cout; ++o) {
      T s = 0;
      for (int i = 0; i < hw; ++i) s += dyn[static_cast<std::size_t>(o) * hw + i];
      dbias[o] += s;
    }
    if (dx) {
      gemm::tn(kdim, hw, cout, weight, kdim, dyn, hw, dcols.data(), hw);
      col2im(cin, h, w, ks, pad, dcols.data(), dx + static_cast<std::size_t>(n) * cin * hw);
    }
  }
}

// ------------------------------------------------------------ group norm

/// x: b×c×hw normalized over each group of c/groups channels with per-channel
/// affine. mean/rstd hold b·groups entries.
template <class T>
void group_norm_forward(int b, int c, int hw, int groups, const T* x, const T* gamma, const T* beta, T* y, T* mean,
                        T* rstd) {
  if (groups < 1 || c % groups != 0) throw ConfigError("group_norm: channels not divisible by groups");
  const int cg = c / groups;
  const std::size_t gsize = static_cast<std::size_t>(cg) * hw;
  for (int n = 0; n < b; ++n)
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(n) * c + static_cast<std::size_t>(g) * cg) * hw;
      double mu = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) mu += x[off + i];
      mu /= gsize;
      double var = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) {
        const double d = x[off + i] - mu;
        var += d * d;
      }
      var /= gsize;
      const double rs = 1.0 / std::sqrt(var + kNormEps);
      mean[n * groups + g] = static_cast<T>(mu);
      rstd[n * groups + g] = static_cast<T>(rs);
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = g * cg + cc;
        for (int i = 0; i < hw; ++i) {
          const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + i;
          y[idx] = static_cast<T>((x[idx] - mu) * rs) * gamma[ch] + beta[ch];
        }
      }
    }
}

template <class T>
void group_norm_backward(int b, int c, int hw, int groups, const T* x, const T* gamma, const T* mean, const T* rstd,
                         const T* dy, T* dx, T* dgamma, T* dbeta) {
  const int cg = c / groups;
  const std::size_t gsize = static_cast<std::size_t>(cg) * hw;
  for (int n = 0; n < b; ++n)
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(n) * c + static_cast<std::size_t>(g) * cg) * hw;
      const T m = mean[n * groups + g], s = rstd[n * groups + g];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = g * cg + cc;
        for (int i = 0; i < hw; ++i) {
          const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + i;
          const T xhat = (x[idx] - m) * s;
          const T gv = dy[idx] * gamma[ch];
          sum_g += gv;
          sum_gx += gv * xhat;
          dgamma[ch] += dy[idx] * xhat;
          dbeta[ch] += dy[idx];
        }
      }
      const T mg = static_cast<T>(sum_g / gsize), mgx = static_cast<T>(sum_gx / gsize);
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = g * cg + cc;
        for (int i = 0; i < hw; ++i) {
          const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + i;
          const T xhat = (x[idx] - m) * s;
          dx[idx] = s * (dy[idx] * gamma[ch] - mg - xhat * mgx);
        }
      }
    }
}

// ------------------------------------------------------ relu and pooling

template <class T>
void relu_forward(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
}

/// 2×2 average pooling, stride 2, on planes of size h×w (h, w even).
template <class T>
void avg_pool2_forward(int planes, int h, int w, const T* x, T* y) {
  const int oh = h / 2, ow = w / 2;
  for (int p = 0; p < planes; ++p) {
    const T* xp = x + static_cast<std::size_t>(p) * h * w;
    T* yp = y + static_cast<std::size_t>(p) * oh * ow;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const T* r0 = xp + (2 * i) * w + 2 * j;
        yp[i * ow + j] = T(0.25) * (r0[0] + r0[1] + r0[w] + r0[w + 1]);
      }
  }
}

template <class T>
void avg_pool2_backward(int planes, int h, int w, const T* dy, T* dx) {
  const int oh = h / 2, ow = w / 2;
  for (int p = 0; p < planes; ++p) {
    const T* dyp = dy + static_cast<std::size_t>(p) * oh * ow;
    T* dxp = dx + static_cast<std::size_t>(p) * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) dxp[i * w + j] = T(0.25) * dyp[(i / 2) * ow + j / 2];
  }
}

// --------------------------------------------------------- cross-entropy

/// Mean softmax cross-entropy over rows; writes dlogits (already divided by
/// rows) when non-null.
template <class T>
double cross_entropy(int rows, int classes, const T* logits, const int* labels, T* dlogits) {
  double loss = 0.0;
  std::vector<T> p(static_cast<std::size_t>(classes));
  for (int r = 0; r < rows; ++r) {
    const T* lr = logits + static_cast<std::size_t>(r) * classes;
    if (labels[r] < 0 || labels[r] >= classes) throw ConfigError("cross_entropy: label out of range");
    softmax_rows(1, classes, lr, p.data());
    loss -= std::log(std::max(static_cast<double>(p[labels[r]]), 1e-300));
    if (dlogits) {
      T* dr = dlogits + static_cast<std::size_t>(r) * classes;
      for (int j = 0; j < classes; ++j) dr[j] = (p[j] - (j == labels[r] ? T(1) : T(0))) / static_cast<T>(rows);
    }
  }
  return loss / rows;
}

}  // namespace ddistill::kernels
