// Copyright 2026 The CAST Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable operations on Tensor<Scalar>.
//
// Every backward rule is written with the operations in this file, so with
// grad mode on a backward pass records its own graph and can be differentiated
// again. Rules that need a forward value (exp, sqrt, softmax) recompute it from
// the inputs instead of capturing the output, which keeps the graph acyclic.

#pragma once

#include "cast/autodiff/tensor.hpp"

#include <cmath>
#include <limits>

namespace cast::ad {

namespace detail {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require(bool ok, std::string_view op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, std::string_view op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename S>
using Grads = std::vector<Tensor<S>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  return Tensor<S>::from_op(a.shape(), a.values() + b.values(), "add", {a, b},
                            [](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{g, g};
                            });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  return Tensor<S>::from_op(x.shape(), x.values() * factor, "scale", {x},
                            [factor](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{scale(g, factor)};
                            });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  return Tensor<S>::from_op(a.shape(), a.values() - b.values(), "sub", {a, b},
                            [](const Tensor<S>& g, const std::vector<bool>& needs) {
                              return detail::Grads<S>{g, needs[1] ? neg(g) : Tensor<S>{}};
                            });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  return Tensor<S>::from_op(a.shape(), a.values().cwiseProduct(b.values()), "mul", {a, b},
                            [a, b](const Tensor<S>& g, const std::vector<bool>& needs) {
                              return detail::Grads<S>{needs[0] ? mul(g, b) : Tensor<S>{},
                                                      needs[1] ? mul(g, a) : Tensor<S>{}};
                            });
}

template <typename S>
Tensor<S> add_constant(const Tensor<S>& x, S c) {
  return Tensor<S>::from_op(x.shape(), (x.values().array() + c).matrix(), "add_constant", {x},
                            [](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{g};
                            });
}

/// 1 where x > threshold, else 0. A constant: it carries no graph.
template <typename S>
Tensor<S> indicator_greater(const Tensor<S>& x, S threshold) {
  typename Tensor<S>::Vector v = (x.values().array() > threshold).template cast<S>().matrix();
  return Tensor<S>(x.shape(), std::move(v));
}

/// max(x, 0). Subgradient at 0 is 0; the gating mask is constant so the
/// second derivative vanishes.
template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return Tensor<S>::from_op(x.shape(), x.values().cwiseMax(S(0)), "relu", {x},
                            [x](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{mul(g, indicator_greater(x, S(0)))};
                            });
}

template <typename S>
Tensor<S> clamp_min(const Tensor<S>& x, S lo) {
  return Tensor<S>::from_op(x.shape(), x.values().cwiseMax(lo), "clamp_min", {x},
                            [x, lo](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{mul(g, indicator_greater(x, lo))};
                            });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return Tensor<S>::from_op(x.shape(), x.values().array().exp().matrix(), "exp", {x},
                            [x](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{mul(g, exp(x))};
                            });
}

template <typename S>
Tensor<S> reciprocal(const Tensor<S>& x) {
  return Tensor<S>::from_op(x.shape(), x.values().array().inverse().matrix(), "reciprocal", {x},
                            [x](const Tensor<S>& g, const std::vector<bool>&) {
                              const Tensor<S> r = reciprocal(x);
                              return detail::Grads<S>{neg(mul(g, mul(r, r)))};
                            });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return Tensor<S>::from_op(x.shape(), x.values().array().log().matrix(), "log", {x},
                            [x](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{mul(g, reciprocal(x))};
                            });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
  return Tensor<S>::from_op(x.shape(), x.values().cwiseSqrt(), "sqrt", {x},
                            [x](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{mul(g, scale(reciprocal(sqrt(x)), S(0.5)))};
                            });
}

// ---------------------------------------------------------------------------
// Scalar broadcasting and reductions

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  detail::require(numel_of(shape) == x.numel(), "reshape",
                  "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return Tensor<S>::from_op(std::move(shape), x.values(), "reshape", {x},
                            [from = x.shape()](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{reshape(g, from)};
                            });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x);

/// Broadcasts a one-element tensor to `shape`.
template <typename S>
Tensor<S> expand_scalar(const Tensor<S>& s, Shape shape) {
  detail::require(s.numel() == 1, "expand_scalar", "source must hold one value");
  const Index n = numel_of(shape);
  return Tensor<S>::from_op(std::move(shape), Tensor<S>::Vector::Constant(n, s[0]), "expand_scalar",
                            {s}, [from = s.shape()](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{reshape(sum(g), from)};
                            });
}

/// Sum of all elements, as a rank-0 tensor. Accumulates left to right.
template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = 0;
  for (Index i = 0; i < x.numel(); ++i) total += x[i];
  return Tensor<S>::from_op(Shape{}, Tensor<S>::Vector::Constant(1, total), "sum", {x},
                            [shape = x.shape()](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{expand_scalar(g, shape)};
                            });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Tensor<S> dot(const Tensor<S>& a, const Tensor<S>& b);

/// x times a one-element tensor s.
template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& x, const Tensor<S>& s) {
  detail::require(s.numel() == 1, "mul_scalar", "scale must hold one value, got " + to_string(s.shape()));
  return Tensor<S>::from_op(x.shape(), x.values() * s[0], "mul_scalar", {x, s},
                            [x, s](const Tensor<S>& g, const std::vector<bool>& needs) {
                              return detail::Grads<S>{
                                  needs[0] ? mul_scalar(g, s) : Tensor<S>{},
                                  needs[1] ? reshape(dot(g, x), s.shape()) : Tensor<S>{}};
                            });
}

/// Inner product of two equally shaped tensors, accumulated in index order.
template <typename S>
Tensor<S> dot(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "dot");
  S total = 0;
  for (Index i = 0; i < a.numel(); ++i) total += a[i] * b[i];
  return Tensor<S>::from_op(Shape{}, Tensor<S>::Vector::Constant(1, total), "dot", {a, b},
                            [a, b](const Tensor<S>& g, const std::vector<bool>& needs) {
                              return detail::Grads<S>{needs[0] ? mul_scalar(b, g) : Tensor<S>{},
                                                      needs[1] ? mul_scalar(a, g) : Tensor<S>{}};
                            });
}

/// x / max(||x||, eps). The clamp is applied to the squared norm so the zero
/// vector has a finite (zero) gradient.
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& x, S eps) {
  const Tensor<S> norm = sqrt(clamp_min(dot(x, x), eps * eps));
  return mul_scalar(x, reciprocal(norm));
}

// ---------------------------------------------------------------------------
// 1-d slicing

template <typename S>
Tensor<S> pad(const Tensor<S>& x, Index offset, Index total);

template <typename S>
Tensor<S> slice(const Tensor<S>& x, Index offset, Index length) {
  detail::require(x.rank() == 1, "slice", "expects a vector, got " + to_string(x.shape()));
  detail::require(offset >= 0 && length >= 0 && offset + length <= x.numel(), "slice", "range out of bounds");
  return Tensor<S>::from_op(Shape{length}, x.values().segment(offset, length), "slice", {x},
                            [offset, total = x.numel()](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{pad(g, offset, total)};
                            });
}

/// Embeds x into a zero vector of length `total` starting at `offset`.
template <typename S>
Tensor<S> pad(const Tensor<S>& x, Index offset, Index total) {
  detail::require(x.rank() == 1, "pad", "expects a vector, got " + to_string(x.shape()));
  detail::require(offset >= 0 && offset + x.numel() <= total, "pad", "range out of bounds");
  typename Tensor<S>::Vector v = Tensor<S>::Vector::Zero(total);
  v.segment(offset, x.numel()) = x.values();
  return Tensor<S>::from_op(Shape{total}, std::move(v), "pad", {x},
                            [offset, length = x.numel()](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{slice(g, offset, length)};
                            });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts) {
  Index total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 1, "concat", "expects vectors, got " + to_string(p.shape()));
    total += p.numel();
  }
  typename Tensor<S>::Vector v(total);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.segment(at, p.numel()) = p.values();
    at += p.numel();
  }
  return Tensor<S>::from_op(Shape{total}, std::move(v), "concat", parts,
                            [offsets, parts](const Tensor<S>& g, const std::vector<bool>& needs) {
                              detail::Grads<S> out(parts.size());
                              for (std::size_t i = 0; i < parts.size(); ++i) {
                                if (needs[i]) out[i] = slice(g, offsets[i], parts[i].numel());
                              }
                              return out;
                            });
}

// ---------------------------------------------------------------------------
// Softmax family (over all elements)

template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  const S peak = x.values().maxCoeff();
  typename Tensor<S>::Vector e = (x.values().array() - peak).exp().matrix();
  S total = 0;
  for (Index i = 0; i < e.size(); ++i) total += e(i);
  e /= total;
  return Tensor<S>::from_op(x.shape(), std::move(e), "softmax", {x},
                            [x](const Tensor<S>& g, const std::vector<bool>&) {
                              const Tensor<S> s = softmax(x);
                              const Tensor<S> centered = sub(g, expand_scalar(dot(g, s), g.shape()));
                              return detail::Grads<S>{mul(s, centered)};
                            });
}

/// log(sum(exp(x))) with max subtraction.
template <typename S>
Tensor<S> logsumexp(const Tensor<S>& x) {
  detail::require(x.numel() > 0, "logsumexp", "empty input");
  const S peak = x.values().maxCoeff();
  S total = 0;
  for (Index i = 0; i < x.numel(); ++i) total += std::exp(x[i] - peak);
  const S value = peak + std::log(total);
  return Tensor<S>::from_op(Shape{}, Tensor<S>::Vector::Constant(1, value), "logsumexp", {x},
                            [x](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{mul_scalar(softmax(x), g)};
                            });
}

// ---------------------------------------------------------------------------
// Dense linear algebra

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  detail::require(x.rank() == 2, "transpose", "expects a matrix, got " + to_string(x.shape()));
  const Index rows = x.dim(0), cols = x.dim(1);
  detail::RowMatrix<S> t = Eigen::Map<const detail::RowMatrix<S>>(x.data(), rows, cols).transpose();
  return Tensor<S>::from_op(Shape{cols, rows}, Eigen::Map<typename Tensor<S>::Vector>(t.data(), t.size()),
                            "transpose", {x}, [](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{transpose(g)};
                            });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul",
                  "incompatible operands " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::RowMatrix<S> c = Eigen::Map<const detail::RowMatrix<S>>(a.data(), m, k) *
                           Eigen::Map<const detail::RowMatrix<S>>(b.data(), k, n);
  return Tensor<S>::from_op(Shape{m, n}, Eigen::Map<typename Tensor<S>::Vector>(c.data(), c.size()),
                            "matmul", {a, b}, [a, b](const Tensor<S>& g, const std::vector<bool>& needs) {
                              return detail::Grads<S>{needs[0] ? matmul(g, transpose(b)) : Tensor<S>{},
                                                      needs[1] ? matmul(transpose(a), g) : Tensor<S>{}};
                            });
}

// ---------------------------------------------------------------------------
// Convolution. The three members of the family are the partial contractions
// of one trilinear form sum(x * w * dy), so each one's gradients are the other
// two and the family is closed under differentiation.

struct ConvGeometry {
  Index stride = 1;
  Index padding = 0;

  Index out_extent(Index in, Index kernel) const { return (in + 2 * padding - kernel) / stride + 1; }
};

namespace detail {

template <typename S>
void im2col(const S* x, Index channels, Index height, Index width, Index kh, Index kw,
            const ConvGeometry& geo, Index out_h, Index out_w, S* cols) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        S* row = cols + ((c * kh + ky) * kw + kx) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * geo.stride + ky - geo.padding;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * geo.stride + kx - geo.padding;
            row[oy * out_w + ox] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                       ? x[(c * height + iy) * width + ix]
                                       : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* cols, Index channels, Index height, Index width, Index kh, Index kw,
            const ConvGeometry& geo, Index out_h, Index out_w, S* x) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const S* row = cols + ((c * kh + ky) * kw + kx) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * geo.stride + ky - geo.padding;
          if (iy < 0 || iy >= height) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * geo.stride + kx - geo.padding;
            if (ix < 0 || ix >= width) continue;
            x[(c * height + iy) * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

struct ConvDims {
  Index n, c, h, w, f, kh, kw, out_h, out_w;
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, const ConvGeometry& geo, std::string_view op) {
  require(x.size() == 4, op, "input must be [N,C,H,W], got " + to_string(x));
  require(w.size() == 4, op, "weight must be [F,C,kh,kw], got " + to_string(w));
  require(x[1] == w[1], op, "channel mismatch: input " + to_string(x) + " weight " + to_string(w));
  require(geo.stride >= 1 && geo.padding >= 0, op, "stride must be >= 1 and padding >= 0");
  require(w[2] <= x[2] + 2 * geo.padding && w[3] <= x[3] + 2 * geo.padding, op,
          "kernel " + to_string(w) + " larger than padded input " + to_string(x));
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0};
  d.out_h = geo.out_extent(d.h, d.kh);
  d.out_w = geo.out_extent(d.w, d.kw);
  return d;
}

}  // namespace detail

template <typename S>
Tensor<S> conv2d_input_grad(const Tensor<S>& dy, const Tensor<S>& w, const Shape& input_shape,
                            const ConvGeometry& geo);
template <typename S>
Tensor<S> conv2d_weight_grad(const Tensor<S>& x, const Tensor<S>& dy, const Shape& weight_shape,
                             const ConvGeometry& geo);

/// Cross-correlation of x [N,C,H,W] with w [F,C,kh,kw] via im2col + GEMM.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const ConvGeometry& geo) {
  const auto d = detail::conv_dims(x.shape(), w.shape(), geo, "conv2d");
  const Index depth = d.c * d.kh * d.kw, plane = d.out_h * d.out_w;
  typename Tensor<S>::Vector out(d.n * d.f * plane);
  detail::RowMatrix<S> cols(depth, plane);
  Eigen::Map<const detail::RowMatrix<S>> wmat(w.data(), d.f, depth);
  for (Index n = 0; n < d.n; ++n) {
    detail::im2col(x.data() + n * d.c * d.h * d.w, d.c, d.h, d.w, d.kh, d.kw, geo, d.out_h, d.out_w,
                   cols.data());
    Eigen::Map<detail::RowMatrix<S>>(out.data() + n * d.f * plane, d.f, plane).noalias() = wmat * cols;
  }
  return Tensor<S>::from_op(Shape{d.n, d.f, d.out_h, d.out_w}, std::move(out), "conv2d", {x, w},
                            [x, w, geo](const Tensor<S>& g, const std::vector<bool>& needs) {
                              return detail::Grads<S>{
                                  needs[0] ? conv2d_input_grad(g, w, x.shape(), geo) : Tensor<S>{},
                                  needs[1] ? conv2d_weight_grad(x, g, w.shape(), geo) : Tensor<S>{}};
                            });
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, Index stride, Index padding) {
  return conv2d(x, w, ConvGeometry{stride, padding});
}

/// Adjoint of conv2d with respect to its input.
template <typename S>
Tensor<S> conv2d_input_grad(const Tensor<S>& dy, const Tensor<S>& w, const Shape& input_shape,
                            const ConvGeometry& geo) {
  const auto d = detail::conv_dims(input_shape, w.shape(), geo, "conv2d_input_grad");
  detail::require(dy.shape() == Shape({d.n, d.f, d.out_h, d.out_w}), "conv2d_input_grad",
                  "upstream shape " + to_string(dy.shape()) + " does not match output geometry");
  const Index depth = d.c * d.kh * d.kw, plane = d.out_h * d.out_w;
  typename Tensor<S>::Vector dx = Tensor<S>::Vector::Zero(d.n * d.c * d.h * d.w);
  detail::RowMatrix<S> cols(depth, plane);
  Eigen::Map<const detail::RowMatrix<S>> wmat(w.data(), d.f, depth);
  for (Index n = 0; n < d.n; ++n) {
    cols.noalias() = wmat.transpose() *
                     Eigen::Map<const detail::RowMatrix<S>>(dy.data() + n * d.f * plane, d.f, plane);
    detail::col2im(cols.data(), d.c, d.h, d.w, d.kh, d.kw, geo, d.out_h, d.out_w,
                   dx.data() + n * d.c * d.h * d.w);
  }
  return Tensor<S>::from_op(input_shape, std::move(dx), "conv2d_input_grad", {dy, w},
                            [dy, w, geo](const Tensor<S>& g, const std::vector<bool>& needs) {
                              return detail::Grads<S>{
                                  needs[0] ? conv2d(g, w, geo) : Tensor<S>{},
                                  needs[1] ? conv2d_weight_grad(g, dy, w.shape(), geo) : Tensor<S>{}};
                            });
}

/// Adjoint of conv2d with respect to its weight. Sums over the batch in order.
template <typename S>
Tensor<S> conv2d_weight_grad(const Tensor<S>& x, const Tensor<S>& dy, const Shape& weight_shape,
                             const ConvGeometry& geo) {
  const auto d = detail::conv_dims(x.shape(), weight_shape, geo, "conv2d_weight_grad");
  detail::require(dy.shape() == Shape({d.n, d.f, d.out_h, d.out_w}), "conv2d_weight_grad",
                  "upstream shape " + to_string(dy.shape()) + " does not match output geometry");
  const Index depth = d.c * d.kh * d.kw, plane = d.out_h * d.out_w;
  detail::RowMatrix<S> dw = detail::RowMatrix<S>::Zero(d.f, depth);
  detail::RowMatrix<S> cols(depth, plane);
  for (Index n = 0; n < d.n; ++n) {
    detail::im2col(x.data() + n * d.c * d.h * d.w, d.c, d.h, d.w, d.kh, d.kw, geo, d.out_h, d.out_w,
                   cols.data());
    dw.noalias() += Eigen::Map<const detail::RowMatrix<S>>(dy.data() + n * d.f * plane, d.f, plane) *
                    cols.transpose();
  }
  return Tensor<S>::from_op(weight_shape, Eigen::Map<typename Tensor<S>::Vector>(dw.data(), dw.size()),
                            "conv2d_weight_grad", {x, dy},
                            [x, dy, geo](const Tensor<S>& g, const std::vector<bool>& needs) {
                              return detail::Grads<S>{
                                  needs[0] ? conv2d_input_grad(dy, g, x.shape(), geo) : Tensor<S>{},
                                  needs[1] ? conv2d(x, g, geo) : Tensor<S>{}};
                            });
}

/// Direct six-loop convolution; no graph. Reference for the GEMM path.
template <typename S>
Tensor<S> conv2d_reference(const Tensor<S>& x, const Tensor<S>& w, const ConvGeometry& geo) {
  const auto d = detail::conv_dims(x.shape(), w.shape(), geo, "conv2d_reference");
  typename Tensor<S>::Vector out = Tensor<S>::Vector::Zero(d.n * d.f * d.out_h * d.out_w);
  for (Index n = 0; n < d.n; ++n)
    for (Index f = 0; f < d.f; ++f)
      for (Index oy = 0; oy < d.out_h; ++oy)
        for (Index ox = 0; ox < d.out_w; ++ox) {
          S acc = 0;
          for (Index c = 0; c < d.c; ++c)
            for (Index ky = 0; ky < d.kh; ++ky)
              for (Index kx = 0; kx < d.kw; ++kx) {
                const Index iy = oy * geo.stride + ky - geo.padding;
                const Index ix = ox * geo.stride + kx - geo.padding;
                if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                acc += x[((n * d.c + c) * d.h + iy) * d.w + ix] * w[((f * d.c + c) * d.kh + ky) * d.kw + kx];
              }
          out(((n * d.f + f) * d.out_h + oy) * d.out_w + ox) = acc;
        }
  return Tensor<S>(Shape{d.n, d.f, d.out_h, d.out_w}, std::move(out));
}

// ---------------------------------------------------------------------------
// Spatial and channel reductions on [N,C,H,W]

template <typename S>
Tensor<S> spatial_expand(const Tensor<S>& x, Index height, Index width);

/// Sum over H and W: [N,C,H,W] -> [N,C].
template <typename S>
Tensor<S> spatial_sum(const Tensor<S>& x) {
  detail::require(x.rank() == 4, "spatial_sum", "expects [N,C,H,W], got " + to_string(x.shape()));
  const Index nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  typename Tensor<S>::Vector v(nc);
  for (Index i = 0; i < nc; ++i) {
    S acc = 0;
    for (Index j = 0; j < plane; ++j) acc += x[i * plane + j];
    v(i) = acc;
  }
  return Tensor<S>::from_op(Shape{x.dim(0), x.dim(1)}, std::move(v), "spatial_sum", {x},
                            [h = x.dim(2), w = x.dim(3)](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{spatial_expand(g, h, w)};
                            });
}

/// Broadcast [N,C] -> [N,C,H,W]; adjoint of spatial_sum.
template <typename S>
Tensor<S> spatial_expand(const Tensor<S>& x, Index height, Index width) {
  detail::require(x.rank() == 2, "spatial_expand", "expects [N,C], got " + to_string(x.shape()));
  const Index nc = x.numel(), plane = height * width;
  typename Tensor<S>::Vector v(nc * plane);
  for (Index i = 0; i < nc; ++i) v.segment(i * plane, plane).setConstant(x[i]);
  return Tensor<S>::from_op(Shape{x.dim(0), x.dim(1), height, width}, std::move(v), "spatial_expand", {x},
                            [](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{spatial_sum(g)};
                            });
}

template <typename S>
Tensor<S> global_sum_pool(const Tensor<S>& x) {
  return spatial_sum(x);
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  detail::require(x.rank() == 4, "global_avg_pool", "expects [N,C,H,W], got " + to_string(x.shape()));
  return scale(spatial_sum(x), S(1) / static_cast<S>(x.dim(2) * x.dim(3)));
}

template <typename S>
Tensor<S> channel_sum(const Tensor<S>& x);

/// Broadcast a per-channel vector [C] to `shape` = [N,C,H,W].
template <typename S>
Tensor<S> channel_expand(const Tensor<S>& b, const Shape& shape) {
  detail::require(b.rank() == 1 && shape.size() == 4 && shape[1] == b.numel(), "channel_expand",
                  "cannot broadcast " + to_string(b.shape()) + " to " + to_string(shape));
  const Index plane = shape[2] * shape[3];
  typename Tensor<S>::Vector v(numel_of(shape));
  for (Index n = 0; n < shape[0]; ++n)
    for (Index c = 0; c < shape[1]; ++c) v.segment((n * shape[1] + c) * plane, plane).setConstant(b[c]);
  return Tensor<S>::from_op(shape, std::move(v), "channel_expand", {b},
                            [](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{channel_sum(g)};
                            });
}

/// Sum over N, H and W: [N,C,H,W] -> [C].
template <typename S>
Tensor<S> channel_sum(const Tensor<S>& x) {
  detail::require(x.rank() == 4, "channel_sum", "expects [N,C,H,W], got " + to_string(x.shape()));
  const Index channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  typename Tensor<S>::Vector v = Tensor<S>::Vector::Zero(channels);
  for (Index n = 0; n < x.dim(0); ++n)
    for (Index c = 0; c < channels; ++c)
      for (Index j = 0; j < plane; ++j) v(c) += x[(n * channels + c) * plane + j];
  return Tensor<S>::from_op(Shape{channels}, std::move(v), "channel_sum", {x},
                            [shape = x.shape()](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{channel_expand(g, shape)};
                            });
}

template <typename S>
Tensor<S> bias_add(const Tensor<S>& x, const Tensor<S>& bias) {
  return add(x, channel_expand(bias, x.shape()));
}

template <typename S>
Tensor<S> avg_unpool2d(const Tensor<S>& x, Index window);

/// Non-overlapping window mean; the window must divide H and W.
template <typename S>
Tensor<S> avg_pool2d(const Tensor<S>& x, Index window) {
  detail::require(x.rank() == 4, "avg_pool2d", "expects [N,C,H,W], got " + to_string(x.shape()));
  detail::require(window >= 1 && x.dim(2) % window == 0 && x.dim(3) % window == 0, "avg_pool2d",
                  "window " + std::to_string(window) + " does not divide " + to_string(x.shape()));
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = h / window, ow = w / window;
  const S norm = S(1) / static_cast<S>(window * window);
  typename Tensor<S>::Vector v(nc * oh * ow);
  for (Index i = 0; i < nc; ++i)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        S acc = 0;
        for (Index dy = 0; dy < window; ++dy)
          for (Index dx = 0; dx < window; ++dx) acc += x[(i * h + oy * window + dy) * w + ox * window + dx];
        v((i * oh + oy) * ow + ox) = acc * norm;
      }
  return Tensor<S>::from_op(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(v), "avg_pool2d", {x},
                            [window](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{avg_unpool2d(g, window)};
                            });
}

/// Adjoint of avg_pool2d: replicate each cell over a window, scaled by 1/window^2.
template <typename S>
Tensor<S> avg_unpool2d(const Tensor<S>& x, Index window) {
  detail::require(x.rank() == 4, "avg_unpool2d", "expects [N,C,H,W], got " + to_string(x.shape()));
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = h * window, ow = w * window;
  const S norm = S(1) / static_cast<S>(window * window);
  typename Tensor<S>::Vector v(nc * oh * ow);
  for (Index i = 0; i < nc; ++i)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) v((i * oh + oy) * ow + ox) = x[(i * h + oy / window) * w + ox / window] * norm;
  return Tensor<S>::from_op(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(v), "avg_unpool2d", {x},
                            [window](const Tensor<S>& g, const std::vector<bool>&) {
                              return detail::Grads<S>{avg_pool2d(g, window)};
                            });
}

}  // namespace cast::ad
