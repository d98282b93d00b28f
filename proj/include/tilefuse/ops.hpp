// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "tilefuse/tensor.hpp"

// Differentiable primitives. Image-like tensors are channel-first (C,H,W);
// token matrices are (N,D) with one token per row.
namespace tilefuse::ops {

namespace detail_ops {

template <class T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t r) {
  if (t.rank() != r)
    shape_fail(op, "expected rank " + std::to_string(r) + ", got " + dims_str(t.dims()));
}

template <class T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) shape_fail(op, a.dims(), b.dims());
}

template <class T, class F>
Tensor<T> unary(const char* op, const Tensor<T>& a, F fwd_and_deriv) {
  const auto x = a.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd_and_deriv(x[i]).first;
  return tilefuse::detail::make_op<T>(op, a.dims(), std::move(y), {a},
                                      [a, fwd_and_deriv](std::span<const T> g, std::span<T* const> pg) {
                                        auto x = a.data();
                                        for (std::size_t i = 0; i < x.size(); ++i)
                                          pg[0][i] += g[i] * fwd_and_deriv(x[i]).second;
                                      });
}

}  // namespace detail_ops

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail_ops::require_same("add", a, b);
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return detail::make_op<T>("add", a.dims(), std::move(y), {a, b}, [](std::span<const T> g, std::span<T* const> pg) {
    for (int k = 0; k < 2; ++k)
      if (pg[k])
        for (std::size_t i = 0; i < g.size(); ++i) pg[k][i] += g[i];
  });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail_ops::require_same("sub", a, b);
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  return detail::make_op<T>("sub", a.dims(), std::move(y), {a, b}, [](std::span<const T> g, std::span<T* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) pg[1][i] -= g[i];
  });
}

/// Elementwise product.
template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail_ops::require_same("mul", a, b);
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return detail::make_op<T>("mul", a.dims(), std::move(y), {a, b},
                            [a, b](std::span<const T> g, std::span<T* const> pg) {
                              if (pg[0])
                                for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * b[i];
                              if (pg[1])
                                for (std::size_t i = 0; i < g.size(); ++i) pg[1][i] += g[i] * a[i];
                            });
}

/// Multiplication by a constant.
template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * c;
  return detail::make_op<T>("scale", a.dims(), std::move(y), {a}, [c](std::span<const T> g, std::span<T* const> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * c;
  });
}

/// `s * a` where `s` is a one-element tensor (a learnable gate, say).
template <std::floating_point T>
Tensor<T> mul_scalar(const Tensor<T>& s, const Tensor<T>& a) {
  if (s.size() != 1) shape_fail("mul_scalar", "gate must hold one element, got " + dims_str(s.dims()));
  const T sv = s[0];
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sv * a[i];
  return detail::make_op<T>("mul_scalar", a.dims(), std::move(y), {s, a},
                            [s, a](std::span<const T> g, std::span<T* const> pg) {
                              if (pg[0]) {
                                T acc = 0;
                                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a[i];
                                pg[0][0] += acc;
                              }
                              if (pg[1]) {
                                const T sv = s[0];
                                for (std::size_t i = 0; i < g.size(); ++i) pg[1][i] += g[i] * sv;
                              }
                            });
}

template <std::floating_point T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail_ops::unary<T>("tanh", a, [](T x) {
    const T y = std::tanh(x);
    return std::pair<T, T>{y, T(1) - y * y};
  });
}

/// Exact (erf) GELU.
template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& a) {
  return detail_ops::unary<T>("gelu", a, [](T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return std::pair<T, T>{x * cdf, cdf + x * pdf};
  });
}

template <std::floating_point T>
Tensor<T> square(const Tensor<T>& a) {
  return detail_ops::unary<T>("square", a, [](T x) { return std::pair<T, T>{x * x, T(2) * x}; });
}

/// Scales column j of a token matrix (N,D) by v[j].
template <std::floating_point T>
Tensor<T> mul_columns(const Tensor<T>& x, const Tensor<T>& v) {
  detail_ops::require_rank("mul_columns", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (v.dims() != Dims{d}) shape_fail("mul_columns", x.dims(), v.dims());
  std::vector<T> y(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] * v[j];
  return detail::make_op<T>("mul_columns", {n, d}, std::move(y), {x, v},
                            [x, v, n, d](std::span<const T> g, std::span<T* const> pg) {
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < d; ++j) {
                                  if (pg[0]) pg[0][i * d + j] += g[i * d + j] * v[j];
                                  if (pg[1]) pg[1][j] += g[i * d + j] * x[i * d + j];
                                }
                            });
}

/// Sum of all elements, as a one-element tensor.
template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return detail::make_op<T>("sum", {1}, {acc}, {a}, [n = a.size()](std::span<const T> g, std::span<T* const> pg) {
    for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[0];
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Column means of a token matrix: (N,D) -> (1,D).
template <std::floating_point T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  detail_ops::require_rank("mean_rows", a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<T> y(d, T(0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) y[c] += a[r * d + c];
  for (auto& v : y) v /= static_cast<T>(n);
  return detail::make_op<T>("mean_rows", {1, d}, std::move(y), {a},
                            [n, d](std::span<const T> g, std::span<T* const> pg) {
                              const T inv = T(1) / static_cast<T>(n);
                              for (std::size_t r = 0; r < n; ++r)
                                for (std::size_t c = 0; c < d; ++c) pg[0][r * d + c] += g[c] * inv;
                            });
}

/// Same values, new extents.
template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Dims dims) {
  if (dims_count(dims) != a.size()) shape_fail("reshape", a.dims(), dims);
  return detail::make_op<T>("reshape", std::move(dims), a.values(), {a},
                            [](std::span<const T> g, std::span<T* const> pg) {
                              for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
                            });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail_ops::require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = a[i * c + j];
  return detail::make_op<T>("transpose", {c, r}, std::move(y), {a},
                            [r, c](std::span<const T> g, std::span<T* const> pg) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) pg[0][i * c + j] += g[j * r + i];
                            });
}

/// (n,k) x (k,m) -> (n,m)
template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail_ops::require_rank("matmul", a, 2);
  detail_ops::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) shape_fail("matmul", a.dims(), b.dims());
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<T> y(n * m, T(0));
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = &B[p * m];
      T* yrow = &y[i * m];
      for (std::size_t j = 0; j < m; ++j) yrow[j] += av * brow[j];
    }
  return detail::make_op<T>("matmul", {n, m}, std::move(y), {a, b},
                            [a, b, n, k, m](std::span<const T> g, std::span<T* const> pg) {
                              auto A = a.data();
                              auto B = b.data();
                              if (pg[0])
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t p = 0; p < k; ++p) {
                                    T acc = 0;
                                    for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * B[p * m + j];
                                    pg[0][i * k + p] += acc;
                                  }
                              if (pg[1])
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t p = 0; p < k; ++p) {
                                    const T av = A[i * k + p];
                                    for (std::size_t j = 0; j < m; ++j) pg[1][p * m + j] += av * g[i * m + j];
                                  }
                            });
}

/// Affine map on token rows: x (N,in), weight (out,in), optional bias (out).
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  detail_ops::require_rank("linear", x, 2);
  detail_ops::require_rank("linear", w, 2);
  if (x.dim(1) != w.dim(1)) shape_fail("linear", x.dims(), w.dims());
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != w.dim(0))) shape_fail("linear(bias)", w.dims(), b.dims());
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  std::vector<T> y(n * out);
  auto X = x.data();
  auto W = w.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = &X[i * in];
    for (std::size_t o = 0; o < out; ++o) {
      const T* wr = &W[o * in];
      T acc = has_bias ? b[o] : T(0);
      for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
      y[i * out + o] = acc;
    }
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return detail::make_op<T>(
      "linear", {n, out}, std::move(y), std::move(inputs),
      [x, w, n, in, out, has_bias](std::span<const T> g, std::span<T* const> pg) {
        auto X = x.data();
        auto W = w.data();
        if (pg[0])
          for (std::size_t i = 0; i < n; ++i) {
            T* gx = pg[0] + i * in;
            for (std::size_t o = 0; o < out; ++o) {
              const T go = g[i * out + o];
              const T* wr = &W[o * in];
              for (std::size_t p = 0; p < in; ++p) gx[p] += go * wr[p];
            }
          }
        if (pg[1])
          for (std::size_t i = 0; i < n; ++i) {
            const T* xr = &X[i * in];
            for (std::size_t o = 0; o < out; ++o) {
              const T go = g[i * out + o];
              T* gw = pg[1] + o * in;
              for (std::size_t p = 0; p < in; ++p) gw[p] += go * xr[p];
            }
          }
        if (has_bias && pg[2])
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out; ++o) pg[2][o] += g[i * out + o];
      });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row of (N,D) to zero mean / unit variance, then applies
/// per-column scale and shift.
template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  detail_ops::require_rank("layer_norm", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.dims() != Dims{d} || beta.dims() != Dims{d}) shape_fail("layer_norm", x.dims(), gamma.dims());
  const T eps = static_cast<T>(kLayerNormEps);
  std::vector<T> y(n * d), xhat(n * d), rstd(n);
  auto X = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += X[i * d + j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T c = X[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (X[i * d + j] - mu) * rstd[i];
      y[i * d + j] = xhat[i * d + j] * gamma[j] + beta[j];
    }
  }
  return detail::make_op<T>("layer_norm", {n, d}, std::move(y), {x, gamma, beta},
                            [gamma, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](std::span<const T> g,
                                                                                         std::span<T* const> pg) {
                              for (std::size_t i = 0; i < n; ++i) {
                                const T* gr = &g[i * d];
                                const T* xh = &xhat[i * d];
                                if (pg[1])
                                  for (std::size_t j = 0; j < d; ++j) pg[1][j] += gr[j] * xh[j];
                                if (pg[2])
                                  for (std::size_t j = 0; j < d; ++j) pg[2][j] += gr[j];
                                if (pg[0]) {
                                  T m1 = 0, m2 = 0;
                                  for (std::size_t j = 0; j < d; ++j) {
                                    const T gh = gr[j] * gamma[j];
                                    m1 += gh;
                                    m2 += gh * xh[j];
                                  }
                                  m1 /= static_cast<T>(d);
                                  m2 /= static_cast<T>(d);
                                  for (std::size_t j = 0; j < d; ++j)
                                    pg[0][i * d + j] += rstd[i] * (gr[j] * gamma[j] - m1 - xh[j] * m2);
                                }
                              }
                            });
}

/// Row-wise softmax of (N,M).
template <std::floating_point T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail_ops::require_rank("softmax_rows", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<T> y(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = x[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x[i * m + j]);
    T z = 0;
    for (std::size_t j = 0; j < m; ++j) z += (y[i * m + j] = std::exp(x[i * m + j] - mx));
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] /= z;
  }
  std::vector<T> saved = y;
  return detail::make_op<T>("softmax_rows", {n, m}, std::move(y), {x},
                            [n, m, s = std::move(saved)](std::span<const T> g, std::span<T* const> pg) {
                              for (std::size_t i = 0; i < n; ++i) {
                                T dot = 0;
                                for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * s[i * m + j];
                                for (std::size_t j = 0; j < m; ++j)
                                  pg[0][i * m + j] += s[i * m + j] * (g[i * m + j] - dot);
                              }
                            });
}

/// Concatenation along `axis`; all other extents must agree.
template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no operands");
  const Dims& d0 = parts[0].dims();
  if (axis >= d0.size()) shape_fail("concat", "axis " + std::to_string(axis) + " out of range for " + dims_str(d0));
  std::size_t total = 0;
  for (auto& p : parts) {
    const Dims& d = p.dims();
    if (d.size() != d0.size()) shape_fail("concat", d0, d);
    for (std::size_t k = 0; k < d.size(); ++k)
      if (k != axis && d[k] != d0[k]) shape_fail("concat", d0, d);
    total += d[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= d0[k];
  for (std::size_t k = axis + 1; k < d0.size(); ++k) inner *= d0[k];
  Dims od = d0;
  od[axis] = total;
  std::vector<T> y(dims_count(od));
  std::vector<std::size_t> widths;
  widths.reserve(parts.size());
  std::size_t off = 0;
  for (auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    widths.push_back(w);
    auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src.begin() + o * w, src.begin() + (o + 1) * w, y.begin() + o * total * inner + off);
    off += w;
  }
  return detail::make_op<T>("concat", std::move(od), std::move(y), parts,
                            [outer, stride = total * inner, widths](std::span<const T> g, std::span<T* const> pg) {
                              std::size_t off = 0;
                              for (std::size_t k = 0; k < widths.size(); ++k) {
                                const std::size_t w = widths[k];
                                if (pg[k])
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < w; ++i) pg[k][o * w + i] += g[o * stride + off + i];
                                off += w;
                              }
                            });
}

/// Channel concatenation of (C_a,H,W) and (C_b,H,W).
template <std::floating_point T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  return concat<T>({a, b}, 0);
}

/// Contiguous range [start, start+len) along `axis`.
template <std::floating_point T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  const Dims& d = a.dims();
  if (axis >= d.size() || len == 0 || start + len > d[axis])
    shape_fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) + ") on axis " +
                            std::to_string(axis) + " of " + dims_str(d));
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= d[k];
  for (std::size_t k = axis + 1; k < d.size(); ++k) inner *= d[k];
  Dims od = d;
  od[axis] = len;
  const std::size_t src_stride = d[axis] * inner, w = len * inner, off = start * inner;
  std::vector<T> y(outer * w);
  auto src = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(src.begin() + o * src_stride + off, src.begin() + o * src_stride + off + w, y.begin() + o * w);
  return detail::make_op<T>("slice", std::move(od), std::move(y), {a},
                            [outer, src_stride, w, off](std::span<const T> g, std::span<T* const> pg) {
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < w; ++i) pg[0][o * src_stride + off + i] += g[o * w + i];
                            });
}

/// (C,H,W) -> (H*W, C): one token per spatial position, row-major.
template <std::floating_point T>
Tensor<T> to_tokens(const Tensor<T>& chw) {
  detail_ops::require_rank("to_tokens", chw, 3);
  return transpose(reshape(chw, {chw.dim(0), chw.dim(1) * chw.dim(2)}));
}

/// (H*W, C) -> (C,H,W)
template <std::floating_point T>
Tensor<T> from_tokens(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  detail_ops::require_rank("from_tokens", tokens, 2);
  if (tokens.dim(0) != h * w) shape_fail("from_tokens", tokens.dims(), Dims{h * w, tokens.dim(1)});
  return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

/// Per-position channel normalization of (C,H,W).
template <std::floating_point T>
Tensor<T> layer_norm_channels(const Tensor<T>& chw, const Tensor<T>& gamma, const Tensor<T>& beta) {
  detail_ops::require_rank("layer_norm_channels", chw, 3);
  return from_tokens(layer_norm(to_tokens(chw), gamma, beta), chw.dim(1), chw.dim(2));
}

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Output dims of conv2d; throws ShapeError on invalid geometry.
inline Dims conv2d_dims(const Dims& in, const Dims& weight, Conv2dGeometry g) {
  if (in.size() != 3 || weight.size() != 4) shape_fail("conv2d", in, weight);
  const std::size_t c = in[0], h = in[1], w = in[2];
  const std::size_t o = weight[0], cg = weight[1], kh = weight[2], kw = weight[3];
  if (g.groups == 0 || g.stride == 0) shape_fail("conv2d", "stride and groups must be positive");
  if (c % g.groups != 0 || o % g.groups != 0 || cg != c / g.groups)
    shape_fail("conv2d", "channels " + dims_str(in) + " / weight " + dims_str(weight) + " incompatible with groups " +
                             std::to_string(g.groups));
  if (h + 2 * g.padding < kh || w + 2 * g.padding < kw)
    shape_fail("conv2d", "kernel " + dims_str(weight) + " exceeds padded input " + dims_str(in));
  return {o, (h + 2 * g.padding - kh) / g.stride + 1, (w + 2 * g.padding - kw) / g.stride + 1};
}

/// 2-D cross-correlation of (C,H,W) with weight (O, C/groups, kh, kw).
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dGeometry geo) {
  const Dims od = conv2d_dims(x.dims(), weight.dims(), geo);
  const bool has_bias = bias.defined();
  if (has_bias && bias.dims() != Dims{od[0]}) shape_fail("conv2d(bias)", weight.dims(), bias.dims());
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = od[0], OH = od[1], OW = od[2];
  const std::size_t CG = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
  const std::size_t OG = O / geo.groups;
  const std::size_t s = geo.stride;
  const long pad = static_cast<long>(geo.padding);
  (void)C;

  // Calls visit(o, ci, ky, kx, oy, ox_begin, ox_end, iy, ix_of_first) for every
  // valid tap row so forward and backward share the index arithmetic.
  auto for_each_tap = [=](auto&& visit) {
    for (std::size_t o = 0; o < O; ++o) {
      const std::size_t g0 = (o / OG) * CG;
      for (std::size_t c = 0; c < CG; ++c) {
        const std::size_t ci = g0 + c;
        for (std::size_t ky = 0; ky < KH; ++ky)
          for (std::size_t kx = 0; kx < KW; ++kx) {
            // ix = ox*s - pad + kx must lie in [0, W)
            const long base = static_cast<long>(kx) - pad;
            std::size_t ox0 = 0;
            if (base < 0) ox0 = static_cast<std::size_t>((-base + static_cast<long>(s) - 1) / static_cast<long>(s));
            std::size_t ox1 = OW;
            {
              const long lim = static_cast<long>(W) - 1 - base;  // ox*s <= lim
              if (lim < 0) continue;
              ox1 = std::min(OW, static_cast<std::size_t>(lim) / s + 1);
            }
            if (ox0 >= ox1) continue;
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const long iy = static_cast<long>(oy * s) - pad + static_cast<long>(ky);
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              visit(o, ci, c, ky, kx, oy, ox0, ox1, static_cast<std::size_t>(iy), base);
            }
          }
      }
    }
  };

  std::vector<T> y(O * OH * OW, T(0));
  auto X = x.data();
  auto Wt = weight.data();
  for_each_tap([&](std::size_t o, std::size_t ci, std::size_t c, std::size_t ky, std::size_t kx, std::size_t oy,
                   std::size_t ox0, std::size_t ox1, std::size_t iy, long base) {
    const T wv = Wt[((o * CG + c) * KH + ky) * KW + kx];
    T* yr = &y[(o * OH + oy) * OW];
    const T* xr = &X[(ci * H + iy) * W];
    for (std::size_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xr[static_cast<long>(ox * s) + base];
  });
  if (has_bias)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH * OW; ++i) y[o * OH * OW + i] += bias[o];

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_op<T>(
      "conv2d", od, std::move(y), std::move(inputs),
      [x, weight, for_each_tap, H, W, OH, OW, CG, KH, KW, s, has_bias](std::span<const T> g, std::span<T* const> pg) {
        auto X = x.data();
        auto Wt = weight.data();
        for_each_tap([&](std::size_t o, std::size_t ci, std::size_t c, std::size_t ky, std::size_t kx, std::size_t oy,
                         std::size_t ox0, std::size_t ox1, std::size_t iy, long base) {
          const std::size_t widx = ((o * CG + c) * KH + ky) * KW + kx;
          const T* gr = &g[(o * OH + oy) * OW];
          if (pg[0]) {
            const T wv = Wt[widx];
            T* gx = pg[0] + (ci * H + iy) * W;
            for (std::size_t ox = ox0; ox < ox1; ++ox) gx[static_cast<long>(ox * s) + base] += wv * gr[ox];
          }
          if (pg[1]) {
            const T* xr = &X[(ci * H + iy) * W];
            T acc = 0;
            for (std::size_t ox = ox0; ox < ox1; ++ox) acc += gr[ox] * xr[static_cast<long>(ox * s) + base];
            pg[1][widx] += acc;
          }
        });
        if (has_bias && pg[2]) {
          const std::size_t O = g.size() / (OH * OW);
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < OH * OW; ++i) pg[2][o] += g[o * OH * OW + i];
        }
      });
}

namespace detail_ops {

struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel centers, edge clamp: src = (i + 0.5) * in / out - 0.5.
inline std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    double frac = src - static_cast<double>(i0);
    if (i1 == i0) frac = 0;
    taps[i] = {i0, i1, frac};
  }
  return taps;
}

}  // namespace detail_ops

/// Bilinear resampling of (C,H,W) to (C,out_h,out_w).
template <std::floating_point T>
Tensor<T> interpolate_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail_ops::require_rank("interpolate_bilinear", x, 3);
  if (out_h == 0 || out_w == 0) shape_fail("interpolate_bilinear", "output extents must be positive");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H == out_h && W == out_w) {
    return detail::make_op<T>("interpolate_bilinear", x.dims(), x.values(), {x},
                              [](std::span<const T> g, std::span<T* const> pg) {
                                for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
                              });
  }
  auto ty = detail_ops::bilinear_taps(H, out_h);
  auto tx = detail_ops::bilinear_taps(W, out_w);
  std::vector<T> y(C * out_h * out_w);
  auto X = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = &X[c * H * W];
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1, fy] = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1, fx] = tx[ox];
        const T a = xc[y0 * W + x0], b = xc[y0 * W + x1], cc = xc[y1 * W + x0], d = xc[y1 * W + x1];
        const T wy = static_cast<T>(fy), wx = static_cast<T>(fx);
        y[(c * out_h + oy) * out_w + ox] =
            (T(1) - wy) * ((T(1) - wx) * a + wx * b) + wy * ((T(1) - wx) * cc + wx * d);
      }
    }
  }
  return detail::make_op<T>(
      "interpolate_bilinear", {C, out_h, out_w}, std::move(y), {x},
      [C, H, W, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](std::span<const T> g, std::span<T* const> pg) {
        for (std::size_t c = 0; c < C; ++c) {
          T* gc = pg[0] + c * H * W;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto [y0, y1, fy] = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto [x0, x1, fx] = tx[ox];
              const T wy = static_cast<T>(fy), wx = static_cast<T>(fx);
              const T gv = g[(c * out_h + oy) * out_w + ox];
              gc[y0 * W + x0] += gv * (T(1) - wy) * (T(1) - wx);
              gc[y0 * W + x1] += gv * (T(1) - wy) * wx;
              gc[y1 * W + x0] += gv * wy * (T(1) - wx);
              gc[y1 * W + x1] += gv * wy * wx;
            }
          }
        }
      });
}

inline Dims space_to_depth_dims(const Dims& in, std::size_t block) {
  if (in.size() != 3) shape_fail("space_to_depth", "expected (C,H,W), got " + dims_str(in));
  if (block == 0 || in[1] % block != 0 || in[2] % block != 0)
    shape_fail("space_to_depth", "extents " + dims_str(in) + " not divisible by block " + std::to_string(block));
  return {in[0] * block * block, in[1] / block, in[2] / block};
}

namespace detail_ops {

// Index of the input element feeding output (oc, y, x) of space_to_depth.
inline std::size_t s2d_source(std::size_t oc, std::size_t y, std::size_t x, std::size_t block, std::size_t H,
                              std::size_t W) {
  const std::size_t bb = block * block;
  const std::size_t c = oc / bb, by = (oc % bb) / block, bx = oc % block;
  return (c * H + y * block + by) * W + x * block + bx;
}

}  // namespace detail_ops

/// Moves each block×block spatial patch into channels:
/// out[c*b*b + by*b + bx, y, x] = in[c, y*b + by, x*b + bx].
template <std::floating_point T>
Tensor<T> space_to_depth(const Tensor<T>& x, std::size_t block) {
  const Dims od = space_to_depth_dims(x.dims(), block);
  const std::size_t H = x.dim(1), W = x.dim(2);
  std::vector<std::size_t> src(x.size());
  for (std::size_t oc = 0, k = 0; oc < od[0]; ++oc)
    for (std::size_t y = 0; y < od[1]; ++y)
      for (std::size_t xx = 0; xx < od[2]; ++xx, ++k) src[k] = detail_ops::s2d_source(oc, y, xx, block, H, W);
  std::vector<T> out(x.size());
  for (std::size_t k = 0; k < src.size(); ++k) out[k] = x[src[k]];
  return detail::make_op<T>("space_to_depth", od, std::move(out), {x},
                            [src = std::move(src)](std::span<const T> g, std::span<T* const> pg) {
                              for (std::size_t k = 0; k < src.size(); ++k) pg[0][src[k]] += g[k];
                            });
}

/// Inverse of space_to_depth.
template <std::floating_point T>
Tensor<T> depth_to_space(const Tensor<T>& x, std::size_t block) {
  detail_ops::require_rank("depth_to_space", x, 3);
  const std::size_t bb = block * block;
  if (block == 0 || x.dim(0) % bb != 0)
    shape_fail("depth_to_space", "channels of " + dims_str(x.dims()) + " not divisible by block^2");
  const Dims od{x.dim(0) / bb, x.dim(1) * block, x.dim(2) * block};
  std::vector<std::size_t> dst(x.size());
  for (std::size_t oc = 0, k = 0; oc < x.dim(0); ++oc)
    for (std::size_t y = 0; y < x.dim(1); ++y)
      for (std::size_t xx = 0; xx < x.dim(2); ++xx, ++k) dst[k] = detail_ops::s2d_source(oc, y, xx, block, od[1], od[2]);
  std::vector<T> out(x.size());
  for (std::size_t k = 0; k < dst.size(); ++k) out[dst[k]] = x[k];
  return detail::make_op<T>("depth_to_space", od, std::move(out), {x},
                            [dst = std::move(dst)](std::span<const T> g, std::span<T* const> pg) {
                              for (std::size_t k = 0; k < dst.size(); ++k) pg[0][k] += g[dst[k]];
                            });
}

/// Projections of one multi-head attention layer. Weights are (out,in).
template <std::floating_point T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Scaled dot-product multi-head attention followed by the output projection.
/// Self-attention when `q_tokens` and `kv_tokens` are the same tensor.
template <std::floating_point T>
Tensor<T> attention_block(const Tensor<T>& q_tokens, const Tensor<T>& kv_tokens, const AttentionParams<T>& p,
                          std::size_t heads) {
  detail_ops::require_rank("attention_block", q_tokens, 2);
  detail_ops::require_rank("attention_block", kv_tokens, 2);
  if (q_tokens.dim(1) != kv_tokens.dim(1)) shape_fail("attention_block", q_tokens.dims(), kv_tokens.dims());
  const std::size_t d = p.wq.dim(0);
  if (heads == 0 || d % heads != 0)
    shape_fail("attention_block", "head count " + std::to_string(heads) + " does not divide " + std::to_string(d));
  const Tensor<T> q = linear(q_tokens, p.wq, p.bq);
  const Tensor<T> k = linear(kv_tokens, p.wk, p.bk);
  const Tensor<T> v = linear(kv_tokens, p.wv, p.bv);
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : slice(q, 1, h * dh, dh);
    auto kh = heads == 1 ? k : slice(k, 1, h * dh, dh);
    auto vh = heads == 1 ? v : slice(v, 1, h * dh, dh);
    auto att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    outs.push_back(matmul(att, vh));
  }
  const Tensor<T> merged = heads == 1 ? outs[0] : concat(outs, 1);
  return linear(merged, p.wo, p.bo);
}

}  // namespace tilefuse::ops
