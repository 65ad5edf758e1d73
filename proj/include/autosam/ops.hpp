#pragma once

// Differentiable operations over Tensor<T>.
//
// Every op validates its shapes, computes the forward value eagerly and, when
// recording, attaches a closure that maps the output gradient onto its inputs.
// Convolutions use the cross-correlation convention (kernels are not flipped).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "autosam/tensor.hpp"

namespace autosam {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b},
                                [ai = a.impl(), bi = b.impl()](std::span<const T> g) {
                                  if (T* ga = ai->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                  if (T* gb = bi->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b},
                                [ai = a.impl(), bi = b.impl()](std::span<const T> g) {
                                  if (T* ga = ai->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                  if (T* gb = bi->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b},
                                [ai = a.impl(), bi = b.impl()](std::span<const T> g) {
                                  if (T* ga = ai->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
                                  if (T* gb = bi->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result<T>(a.shape(), std::move(out), {a},
                                [ai = a.impl(), s](std::span<const T> g) {
                                  if (T* ga = ai->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                                });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return detail::make_result<T>(Shape{1}, {acc}, {a}, [ai = a.impl()](std::span<const T> g) {
    if (T* ga = ai->grad_buffer())
      for (std::size_t i = 0; i < ai->data.size(); ++i) ga[i] += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// x[..., d] + bias[d]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t d = x.shape().back();
  detail::require(bias.numel() == d, "add_bias: bias length " + std::to_string(bias.numel()) +
                                         " does not match last extent " + std::to_string(d));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % d];
  return detail::make_result<T>(x.shape(), std::move(out), {x, bias},
                                [xi = x.impl(), bi = bias.impl(), d](std::span<const T> g) {
                                  if (T* gx = xi->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                  if (T* gb = bi->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.numel(),
                  "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {x},
                                [xi = x.impl()](std::span<const T> g) {
                                  if (T* gx = xi->grad_buffer())
                                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require(x.ndim() == 2, "transpose: expects a 2-D tensor, got " + to_string(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return detail::make_result<T>(Shape{n, m}, std::move(out), {x},
                                [xi = x.impl(), m, n](std::span<const T> g) {
                                  if (T* gx = xi->grad_buffer())
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  detail::require(axis < ref.size(), "concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    detail::require(p.ndim() == ref.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis) detail::require(p.dim(i) == ref[i], "concat: extent mismatch on axis " + std::to_string(i));
    }
    out_shape[axis] += p.dim(axis);
  }
  const auto split = detail::split_at(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(p.data().begin() + o * block, block,
                  out.begin() + o * split.extent * split.inner + offset * split.inner);
    }
    offset += p.dim(axis);
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    extents.push_back(p.dim(axis));
  }
  return detail::make_result<T>(
      out_shape, std::move(out), parts,
      [impls, extents, offsets, split](std::span<const T> g) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          T* gp = impls[k]->grad_buffer();
          if (!gp) continue;
          const std::size_t block = extents[k] * split.inner;
          for (std::size_t o = 0; o < split.outer; ++o) {
            const T* src = g.data() + o * split.extent * split.inner + offsets[k] * split.inner;
            T* dst = gp + o * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
      });
}

// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::require(axis < x.ndim() && begin < end && end <= x.dim(axis),
                  "slice: bad range on shape " + to_string(x.shape()));
  const auto split = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t block = (end - begin) * split.inner;
  std::vector<T> out(numel(out_shape));
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.data().begin() + o * split.extent * split.inner + begin * split.inner, block,
                out.begin() + o * block);
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x},
                                [xi = x.impl(), split, begin, block](std::span<const T> g) {
                                  T* gx = xi->grad_buffer();
                                  if (!gx) return;
                                  for (std::size_t o = 0; o < split.outer; ++o) {
                                    T* dst = gx + o * split.extent * split.inner + begin * split.inner;
                                    const T* src = g.data() + o * block;
                                    for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                                  }
                                });
}

// Rows of x[L, d] picked by `rows`; repeated indices accumulate in backward.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  detail::require(x.ndim() == 2, "gather_rows: expects [L,d]");
  const std::size_t d = x.dim(1);
  std::vector<T> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::require(rows[r] < x.dim(0), "gather_rows: index out of range");
    std::copy_n(x.data().begin() + rows[r] * d, d, out.begin() + r * d);
  }
  return detail::make_result<T>(Shape{rows.size(), d}, std::move(out), {x},
                                [xi = x.impl(), rows, d](std::span<const T> g) {
                                  T* gx = xi->grad_buffer();
                                  if (!gx) return;
                                  for (std::size_t r = 0; r < rows.size(); ++r)
                                    for (std::size_t j = 0; j < d; ++j) gx[rows[r] * d + j] += g[r * d + j];
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return detail::make_result<T>(Shape{m, n}, std::move(out), {a, b},
                                [ai = a.impl(), bi = b.impl(), m, n, k](std::span<const T> g) {
                                  if (T* ga = ai->grad_buffer())
                                    detail::gemm_nt(m, k, n, g.data(), bi->data.data(), ga);
                                  if (T* gb = bi->grad_buffer())
                                    detail::gemm_tn(k, n, m, ai->data.data(), g.data(), gb);
                                });
}

// ---------------------------------------------------------------------------
// Convolutions

// x[N,Cin,H,W], w[Cout,Cin,kh,kw], b[Cout] -> [N,Cout,H',W'],
// H' = (H + 2*pad - kh) / stride + 1 with exact division required.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t pad) {
  detail::require(x.ndim() == 4 && w.ndim() == 4, "conv2d: expects 4-D input and weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(w.dim(1) == cin, "conv2d: weight expects " + std::to_string(w.dim(1)) +
                                       " input channels, got " + std::to_string(cin));
  detail::require(b.numel() == cout, "conv2d: bias length mismatch");
  detail::require(stride >= 1, "conv2d: stride must be positive");
  detail::require(kh <= h + 2 * pad && kw <= wd + 2 * pad, "conv2d: kernel larger than padded input");
  detail::require((h + 2 * pad - kh) % stride == 0 && (wd + 2 * pad - kw) % stride == 0,
                  "conv2d: stride does not divide padded extent minus kernel");
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
  const long p = static_cast<long>(pad);
  std::vector<T> out(n * cout * ho * wo);
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t co = 0; co < cout; ++co) {
      T* o = out.data() + (in * cout + co) * ho * wo;
      std::fill_n(o, ho * wo, b[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* xp = x.data().data() + (in * cin + ci) * h * wd;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T wv = w[((co * cin + ci) * kh + ky) * kw + kx];
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - p;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              const T* xrow = xp + iy * wd;
              T* orow = o + oy * wo;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - p;
                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                orow[ox] += wv * xrow[ix];
              }
            }
          }
        }
      }
    }
  }
  return detail::make_result<T>(
      Shape{n, cout, ho, wo}, std::move(out), {x, w, b},
      [xi = x.impl(), wi = w.impl(), bi = b.impl(), n, cin, h, wd, cout, kh, kw, ho, wo, stride,
       p](std::span<const T> g) {
        T* gx = xi->grad_buffer();
        T* gw = wi->grad_buffer();
        T* gb = bi->grad_buffer();
        for (std::size_t in = 0; in < n; ++in) {
          for (std::size_t co = 0; co < cout; ++co) {
            const T* go = g.data() + (in * cout + co) * ho * wo;
            if (gb)
              for (std::size_t i = 0; i < ho * wo; ++i) gb[co] += go[i];
            if (!gx && !gw) continue;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const std::size_t xoff = (in * cin + ci) * h * wd;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::size_t widx = ((co * cin + ci) * kh + ky) * kw + kx;
                  const T wv = wi->data[widx];
                  T wacc = 0;
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - p;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const long ix = static_cast<long>(ox * stride + kx) - p;
                      if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                      const std::size_t xidx = xoff + iy * wd + ix;
                      const T gv = go[oy * wo + ox];
                      if (gx) gx[xidx] += gv * wv;
                      wacc += gv * xi->data[xidx];
                    }
                  }
                  if (gw) gw[widx] += wacc;
                }
              }
            }
          }
        }
      });
}

// Adjoint of conv2d with zero padding: x[N,Cin,H,W], w[Cin,Cout,kh,kw],
// b[Cout] -> [N,Cout,(H-1)*stride+kh,(W-1)*stride+kw].
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t stride) {
  detail::require(x.ndim() == 4 && w.ndim() == 4, "conv_transpose2d: expects 4-D input and weight");
  detail::require(stride >= 1, "conv_transpose2d: stride must be positive");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  detail::require(w.dim(0) == cin, "conv_transpose2d: weight expects " + std::to_string(w.dim(0)) +
                                       " input channels, got " + std::to_string(cin));
  const std::size_t cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  detail::require(b.numel() == cout, "conv_transpose2d: bias length mismatch");
  const std::size_t ho = (h - 1) * stride + kh;
  const std::size_t wo = (wd - 1) * stride + kw;
  std::vector<T> out(n * cout * ho * wo);
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t co = 0; co < cout; ++co)
      std::fill_n(out.data() + (in * cout + co) * ho * wo, ho * wo, b[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xp = x.data().data() + (in * cin + ci) * h * wd;
      for (std::size_t co = 0; co < cout; ++co) {
        T* o = out.data() + (in * cout + co) * ho * wo;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T wv = w[((ci * cout + co) * kh + ky) * kw + kx];
            for (std::size_t iy = 0; iy < h; ++iy) {
              T* orow = o + (iy * stride + ky) * wo + kx;
              const T* xrow = xp + iy * wd;
              for (std::size_t ix = 0; ix < wd; ++ix) orow[ix * stride] += wv * xrow[ix];
            }
          }
        }
      }
    }
  }
  return detail::make_result<T>(
      Shape{n, cout, ho, wo}, std::move(out), {x, w, b},
      [xi = x.impl(), wi = w.impl(), bi = b.impl(), n, cin, h, wd, cout, kh, kw, ho, wo,
       stride](std::span<const T> g) {
        T* gx = xi->grad_buffer();
        T* gw = wi->grad_buffer();
        T* gb = bi->grad_buffer();
        for (std::size_t in = 0; in < n; ++in) {
          if (gb) {
            for (std::size_t co = 0; co < cout; ++co) {
              const T* go = g.data() + (in * cout + co) * ho * wo;
              for (std::size_t i = 0; i < ho * wo; ++i) gb[co] += go[i];
            }
          }
          if (!gx && !gw) continue;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::size_t xoff = (in * cin + ci) * h * wd;
            for (std::size_t co = 0; co < cout; ++co) {
              const T* go = g.data() + (in * cout + co) * ho * wo;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::size_t widx = ((ci * cout + co) * kh + ky) * kw + kx;
                  const T wv = wi->data[widx];
                  T wacc = 0;
                  for (std::size_t iy = 0; iy < h; ++iy) {
                    const T* grow = go + (iy * stride + ky) * wo + kx;
                    for (std::size_t ix = 0; ix < wd; ++ix) {
                      const T gv = grow[ix * stride];
                      const std::size_t xidx = xoff + iy * wd + ix;
                      if (gx) gx[xidx] += gv * wv;
                      wacc += gv * xi->data[xidx];
                    }
                  }
                  if (gw) gw[widx] += wacc;
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and activations

// Normalizes over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  detail::require(gamma.numel() == d && beta.numel() == d, "layernorm: affine length mismatch");
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
       rstd = std::move(rstd), d, rows](std::span<const T> g) {
        T* gx = xi->grad_buffer();
        T* gg = gi->grad_buffer();
        T* gb = bi->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* xh = xhat.data() + r * d;
          T mean_dxh = 0, mean_dxh_xh = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = gr[j] * gi->data[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
            if (gg) gg[j] += gr[j] * xh[j];
            if (gb) gb[j] += gr[j];
          }
          if (!gx) continue;
          mean_dxh /= static_cast<T>(d);
          mean_dxh_xh /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = gr[j] * gi->data[j];
            gx[r * d + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.ndim(), "softmax: axis out of range");
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, x[base + k * s.inner]);
      T z = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(x[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= z;
    }
  }
  auto result = detail::make_result<T>(x.shape(), std::move(out), {x}, [](std::span<const T>) {});
  if (result.requires_grad()) {
    // The rule needs the output values; capture them by weak reference to
    // avoid an ownership cycle between the output and its own node.
    std::weak_ptr<TensorImpl<T>> weak_out = result.impl();
    result.impl()->node->backward = [xi = x.impl(), weak_out, s](std::span<const T> g) {
      T* gx = xi->grad_buffer();
      if (!gx) return;
      const auto out = weak_out.lock();
      const std::vector<T>& y = out->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          T dot = 0;
          for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t idx = base + k * s.inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    };
  }
  return result;
}

enum class Activation { relu, gelu };

namespace detail {

template <typename T>
constexpr T gelu_c() {
  return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

template <typename T>
T gelu_value(T x) {
  const T u = gelu_c<T>() * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_derivative(T x) {
  const T u = gelu_c<T>() * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = gelu_c<T>() * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace detail

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  std::vector<T> out(x.numel());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::gelu_value(x[i]);
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x},
                                [xi = x.impl(), kind](std::span<const T> g) {
                                  T* gx = xi->grad_buffer();
                                  if (!gx) return;
                                  const auto& xv = xi->data;
                                  if (kind == Activation::relu) {
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      if (xv[i] > T(0)) gx[i] += g[i];
                                  } else {
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      gx[i] += g[i] * detail::gelu_derivative(xv[i]);
                                  }
                                });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::relu); }
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Activation::gelu); }

// ---------------------------------------------------------------------------
// Attention

// Multi-head scaled dot-product attention on already-projected inputs.
// q[L,d], k[M,d], v[M,d]; head h uses columns [h*d/heads, (h+1)*d/heads) and
// the outputs are concatenated back to [L,d].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads) {
  detail::require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, "attention: expects 2-D inputs");
  const std::size_t len = q.dim(0), keys = k.dim(0), d = q.dim(1);
  detail::require(k.dim(1) == d && v.dim(1) == d && v.dim(0) == keys,
                  "attention: q/k/v extents disagree");
  detail::require(heads >= 1 && d % heads == 0,
                  "attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> probs(heads * len * keys);
  std::vector<T> out(len * d, T(0));
  for (std::size_t hh = 0; hh < heads; ++hh) {
    const std::size_t c0 = hh * dh;
    T* ph = probs.data() + hh * len * keys;
    for (std::size_t i = 0; i < len; ++i) {
      T* prow = ph + i * keys;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < keys; ++j) {
        T acc = 0;
        for (std::size_t c = 0; c < dh; ++c) acc += q[i * d + c0 + c] * k[j * d + c0 + c];
        prow[j] = acc * sc;
        mx = std::max(mx, prow[j]);
      }
      T z = 0;
      for (std::size_t j = 0; j < keys; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        z += prow[j];
      }
      for (std::size_t j = 0; j < keys; ++j) prow[j] /= z;
      T* orow = out.data() + i * d + c0;
      for (std::size_t j = 0; j < keys; ++j) {
        const T pj = prow[j];
        const T* vrow = v.data().data() + j * d + c0;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += pj * vrow[c];
      }
    }
  }
  return detail::make_result<T>(
      Shape{len, d}, std::move(out), {q, k, v},
      [qi = q.impl(), ki = k.impl(), vi = v.impl(), probs = std::move(probs), len, keys, d, dh, heads,
       sc](std::span<const T> g) {
        T* gq = qi->grad_buffer();
        T* gk = ki->grad_buffer();
        T* gv = vi->grad_buffer();
        std::vector<T> dp(keys);
        for (std::size_t hh = 0; hh < heads; ++hh) {
          const std::size_t c0 = hh * dh;
          const T* ph = probs.data() + hh * len * keys;
          for (std::size_t i = 0; i < len; ++i) {
            const T* prow = ph + i * keys;
            const T* grow = g.data() + i * d + c0;
            T dot = 0;
            for (std::size_t j = 0; j < keys; ++j) {
              const T* vrow = vi->data.data() + j * d + c0;
              T acc = 0;
              for (std::size_t c = 0; c < dh; ++c) acc += grow[c] * vrow[c];
              dp[j] = acc;
              dot += acc * prow[j];
              if (gv) {
                T* gvrow = gv + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gvrow[c] += prow[j] * grow[c];
              }
            }
            for (std::size_t j = 0; j < keys; ++j) {
              const T ds = prow[j] * (dp[j] - dot) * sc;
              if (gq) {
                const T* krow = ki->data.data() + j * d + c0;
                T* gqrow = gq + i * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gqrow[c] += ds * krow[c];
              }
              if (gk) {
                const T* qrow = qi->data.data() + i * d + c0;
                T* gkrow = gk + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gkrow[c] += ds * qrow[c];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;
};

// align_corners=false source coordinates, clamped at the low edge.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.ndim() == 4, "bilinear_resize: expects [N,C,H,W]");
  detail::require(out_h >= 1 && out_w >= 1, "bilinear_resize: output extents must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = detail::lerp_taps(h, out_h);
  const auto tx = detail::lerp_taps(w, out_w);
  std::vector<T> out(planes * out_h * out_w);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = x.data().data() + pl * h * w;
    T* dst = out.data() + pl * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T wy1 = static_cast<T>(ty[oy].w1), wy0 = T(1) - wy1;
      const T* r0 = src + ty[oy].i0 * w;
      const T* r1 = src + ty[oy].i1 * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T wx1 = static_cast<T>(tx[ox].w1), wx0 = T(1) - wx1;
        dst[oy * out_w + ox] = wy0 * (wx0 * r0[tx[ox].i0] + wx1 * r0[tx[ox].i1]) +
                               wy1 * (wx0 * r1[tx[ox].i0] + wx1 * r1[tx[ox].i1]);
      }
    }
  }
  Shape shape{x.dim(0), x.dim(1), out_h, out_w};
  return detail::make_result<T>(
      std::move(shape), std::move(out), {x},
      [xi = x.impl(), ty, tx, planes, h, w, out_h, out_w](std::span<const T> g) {
        T* gx = xi->grad_buffer();
        if (!gx) return;
        for (std::size_t pl = 0; pl < planes; ++pl) {
          T* dst = gx + pl * h * w;
          const T* gp = g.data() + pl * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T wy1 = static_cast<T>(ty[oy].w1), wy0 = T(1) - wy1;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T wx1 = static_cast<T>(tx[ox].w1), wx0 = T(1) - wx1;
              const T gv = gp[oy * out_w + ox];
              dst[ty[oy].i0 * w + tx[ox].i0] += gv * wy0 * wx0;
              dst[ty[oy].i0 * w + tx[ox].i1] += gv * wy0 * wx1;
              dst[ty[oy].i1 * w + tx[ox].i0] += gv * wy1 * wx0;
              dst[ty[oy].i1 * w + tx[ox].i1] += gv * wy1 * wx1;
            }
          }
        }
      });
}

}  // namespace autosam
