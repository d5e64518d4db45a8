#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "datr/numkit/gemm.hpp"
#include "datr/numkit/rng.hpp"
#include "datr/numkit/tensor.hpp"

// Differentiable primitives. Tensors follow a rows-by-last-axis convention:
// any op that works on matrices treats the leading axes, flattened, as rows
// and the last axis as features. Image tensors are {H, W, C} (channels last,
// so per-pixel feature vectors are contiguous).
namespace datr::numkit {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;
inline constexpr double kLogClamp = 1e-12;

namespace detail {

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Parallel elementwise map over [0, n); fn(i) must touch only index i.
template <typename F>
inline void elementwise(long n, F&& fn) {
  if (n < 16384) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  parallel_for(n, [&](long b, long e) {
    for (long i = b; i < e; ++i) fn(i);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.val().size());
  detail::elementwise(out.size(), [&](long i) { out[i] = a.val()[i] + b.val()[i]; });
  auto pa = a.node(), pb = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad)
      detail::elementwise(n.grad.size(), [&](long i) { pa->grad[i] += n.grad[i]; });
    if (pb->requires_grad)
      detail::elementwise(n.grad.size(), [&](long i) { pb->grad[i] += n.grad[i]; });
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.val().size());
  detail::elementwise(out.size(), [&](long i) { out[i] = a.val()[i] - b.val()[i]; });
  auto pa = a.node(), pb = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    if (pb->requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.val().size());
  detail::elementwise(out.size(), [&](long i) { out[i] = a.val()[i] * b.val()[i]; });
  auto pa = a.node(), pb = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad)
      detail::elementwise(n.grad.size(), [&](long i) { pa->grad[i] += n.grad[i] * pb->val[i]; });
    if (pb->requires_grad)
      detail::elementwise(n.grad.size(), [&](long i) { pb->grad[i] += n.grad[i] * pa->val[i]; });
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.val().size());
  detail::elementwise(out.size(), [&](long i) { out[i] = a.val()[i] * s; });
  auto pa = a.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {pa}, [pa, s](Node<T>& n) {
    detail::elementwise(n.grad.size(), [&](long i) { pa->grad[i] += n.grad[i] * s; });
  });
}

// Per-row constant scaling (coefficients carry no gradient).
template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, std::vector<T> coef) {
  const long rows = x.rows();
  const long c = x.last_dim();
  if (static_cast<long>(coef.size()) != rows)
    throw DimensionError("row_scale: " + std::to_string(coef.size()) + " coefficients for " +
                         std::to_string(rows) + " rows");
  std::vector<T> out(x.val().size());
  for (long r = 0; r < rows; ++r)
    for (long j = 0; j < c; ++j) out[r * c + j] = x.val()[r * c + j] * coef[r];
  auto px = x.node();
  return Tensor<T>::make_op(x.shape(), std::move(out), {px}, [px, coef, rows, c](Node<T>& n) {
    for (long r = 0; r < rows; ++r)
      for (long j = 0; j < c; ++j) px->grad[r * c + j] += n.grad[r * c + j] * coef[r];
  });
}

namespace detail {

// Vectorizable exp for the f32 path: exp(x) = 2^(x/ln2) with a degree-2
// polynomial on the fractional part; relative error ~3e-5, plenty for
// training at f32 (f64 uses libm).
inline float fast_expf(float x) {
  x = std::max(-87.0f, std::min(87.0f, x)) * 1.442695041f;
  const float fl = std::floor(x);
  const float fr = x - fl;
  const float p = 1.0f + fr * (0.6931472f + fr * (0.2402265f + fr * 0.0796878f));
  const std::int32_t bits = (static_cast<std::int32_t>(fl) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return scale * p;
}

// Abramowitz-Stegun 7.1.26 rational erf, |err| < 1.5e-7.
inline float fast_erff(float x) {
  const float sign = x < 0 ? -1.f : 1.f;
  const float a = std::fabs(x);
  const float t = 1.0f / (1.0f + 0.3275911f * a);
  const float poly =
      t * (0.254829592f +
           t * (-0.284496736f + t * (1.421413741f + t * (-1.453152027f + t * 1.061405429f))));
  return sign * (1.0f - poly * fast_expf(-a * a));
}

template <typename T>
inline T erf_of(T v) {
  if constexpr (sizeof(T) == 4)
    return fast_erff(v);
  else
    return std::erf(v);
}

template <typename T>
inline T exp_of(T v) {
  if constexpr (sizeof(T) == 4)
    return fast_expf(v);
  else
    return std::exp(v);
}

}  // namespace detail

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.val().size());
  const T* xv = x.val().data();
  detail::elementwise(out.size(), [&, xv](long i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + detail::erf_of<T>(v * static_cast<T>(kInvSqrt2)));
  });
  auto px = x.node();
  return Tensor<T>::make_op(x.shape(), std::move(out), {px}, [px](Node<T>& n) {
    detail::elementwise(n.grad.size(), [&](long i) {
      const T v = px->val[i];
      const T d = T(0.5) * (T(1) + detail::erf_of<T>(v * static_cast<T>(kInvSqrt2))) +
                  v * detail::exp_of<T>(T(-0.5) * v * v) * static_cast<T>(kInvSqrt2Pi);
      px->grad[i] += n.grad[i] * d;
    });
  });
}

// ---------------------------------------------------------------- structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
  long c = 1;
  for (int d : shape) c *= d;
  if (c != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  auto px = x.node();
  return Tensor<T>::make_op(std::move(shape), x.val(), {px}, [px](Node<T>& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected 2-d, got " + shape_str(x.shape()));
  const long m = x.size(0), n = x.size(1);
  std::vector<T> out(x.val().size());
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j) out[j * m + i] = x.val()[i * n + j];
  auto px = x.node();
  return Tensor<T>::make_op({static_cast<int>(n), static_cast<int>(m)}, std::move(out), {px},
                            [px, m, n](Node<T>& nd) {
                              for (long i = 0; i < m; ++i)
                                for (long j = 0; j < n; ++j)
                                  px->grad[i * n + j] += nd.grad[j * m + i];
                            });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
  const long rows = x.rows();
  const long c = x.last_dim();
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw DimensionError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") out of " + std::to_string(c) + " columns");
  const long w = c1 - c0;
  std::vector<int> shape = x.shape();
  shape.back() = static_cast<int>(w);
  std::vector<T> out(rows * w);
  detail::elementwise(rows, [&](long r) {
    std::copy_n(x.val().data() + r * c + c0, w, out.data() + r * w);
  });
  auto px = x.node();
  return Tensor<T>::make_op(std::move(shape), std::move(out), {px},
                            [px, rows, c, c0, w](Node<T>& n) {
                              detail::elementwise(rows, [&](long r) {
                                for (long j = 0; j < w; ++j)
                                  px->grad[r * c + c0 + j] += n.grad[r * w + j];
                              });
                            });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const long rows = parts[0].rows();
  long total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
    total += p.last_dim();
  }
  std::vector<int> shape = parts[0].shape();
  shape.back() = static_cast<int>(total);
  std::vector<T> out(rows * total);
  std::vector<NodePtr<T>> parents;
  std::vector<long> offs;
  long off = 0;
  for (const auto& p : parts) {
    const long w = p.last_dim();
    const long o = off;
    detail::elementwise(rows, [&](long r) {
      std::copy_n(p.val().data() + r * w, w, out.data() + r * total + o);
    });
    parents.push_back(p.node());
    offs.push_back(off);
    off += w;
  }
  auto back = [parents, offs, rows, total](Node<T>& n) {
    for (std::size_t k = 0; k < parents.size(); ++k) {
      auto& p = parents[k];
      if (!p->requires_grad) continue;
      const long w = p->numel() / rows;
      const long o = offs[k];
      detail::elementwise(rows, [&](long r) {
        for (long j = 0; j < w; ++j) p->grad[r * w + j] += n.grad[r * total + o + j];
      });
    }
  };
  return Tensor<T>::make_op(std::move(shape), std::move(out), parents, back);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const long c = parts[0].last_dim();
  long rows = 0;
  for (const auto& p : parts) {
    if (p.last_dim() != c)
      throw DimensionError("concat_rows: feature width mismatch " + shape_str(p.shape()));
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(rows * c);
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) {
    out.insert(out.end(), p.val().begin(), p.val().end());
    parents.push_back(p.node());
  }
  auto back = [parents](Node<T>& n) {
    std::size_t off = 0;
    for (const auto& p : parents) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < p->val.size(); ++i) p->grad[i] += n.grad[off + i];
      off += p->val.size();
    }
  };
  return Tensor<T>::make_op({static_cast<int>(rows), static_cast<int>(c)}, std::move(out),
                            parents, back);
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<int> idx) {
  const long rows = x.rows();
  const long c = x.last_dim();
  for (int i : idx)
    if (i < 0 || i >= rows)
      throw DimensionError("gather_rows: index " + std::to_string(i) + " out of " +
                           std::to_string(rows) + " rows");
  std::vector<T> out(idx.size() * c);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x.val().data() + static_cast<long>(idx[r]) * c, c, out.data() + r * c);
  auto px = x.node();
  std::vector<int> shape{static_cast<int>(idx.size()), static_cast<int>(c)};
  return Tensor<T>::make_op(std::move(shape), std::move(out), {px}, [px, idx, c](Node<T>& n) {
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (long j = 0; j < c; ++j)
        px->grad[static_cast<long>(idx[r]) * c + j] += n.grad[r * c + j];
  });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const long m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<T> out(m * n);
  gemm_nn(a.val().data(), b.val().data(), out.data(), m, k, n);
  auto pa = a.node(), pb = b.node();
  return Tensor<T>::make_op({static_cast<int>(m), static_cast<int>(n)}, std::move(out), {pa, pb},
                            [pa, pb, m, k, n](Node<T>& nd) {
                              if (pa->requires_grad)
                                gemm_nt_acc(nd.grad.data(), pb->val.data(), pa->grad.data(), m, n,
                                            k);
                              if (pb->requires_grad)
                                gemm_tn_acc(pa->val.data(), nd.grad.data(), pb->grad.data(), m, k,
                                            n);
                            });
}

// y = x W (+ b); x may have any rank, its last axis must match W's rows.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  if (w.rank() != 2 || x.last_dim() != w.size(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  const long rows = x.rows(), cin = w.size(0), cout = w.size(1);
  if (b.defined() && b.numel() != cout)
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " for " +
                         std::to_string(cout) + " outputs");
  std::vector<T> out(rows * cout);
  gemm_nn(x.val().data(), w.val().data(), out.data(), rows, cin, cout);
  if (b.defined()) {
    const T* bv = b.val().data();
    auto add_bias = [&](long r0, long r1) {
      for (long r = r0; r < r1; ++r) {
        T* row = out.data() + r * cout;
        for (long j = 0; j < cout; ++j) row[j] += bv[j];
      }
    };
    if (rows * cout < 16384)
      add_bias(0, rows);
    else
      parallel_for(rows, add_bias);
  }
  std::vector<int> shape = x.shape();
  shape.back() = static_cast<int>(cout);
  auto px = x.node(), pw = w.node();
  NodePtr<T> pb = b.defined() ? b.node() : nullptr;
  return Tensor<T>::make_op(std::move(shape), std::move(out), {px, pw, pb},
                            [px, pw, pb, rows, cin, cout](Node<T>& nd) {
                              if (px->requires_grad)
                                gemm_nt_acc(nd.grad.data(), pw->val.data(), px->grad.data(), rows,
                                            cout, cin);
                              if (pw->requires_grad)
                                gemm_tn_acc(px->val.data(), nd.grad.data(), pw->grad.data(), rows,
                                            cin, cout);
                              if (pb && pb->requires_grad)
                                for (long r = 0; r < rows; ++r)
                                  for (long j = 0; j < cout; ++j)
                                    pb->grad[j] += nd.grad[r * cout + j];
                            });
}

// ---------------------------------------------------------------- normalization

// Numerically stabilized softmax along `axis`; each slice sums to 1.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  long outer = 1, inner = 1;
  const long len = x.size(axis);
  for (int i = 0; i < axis; ++i) outer *= x.size(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.size(i);
  std::vector<T> out(x.val().size());
  const T* xv = x.val().data();
  auto soft_rows = [&](long o0, long o1) {
    for (long o = o0; o < o1; ++o) {
      for (long i = 0; i < inner; ++i) {
        const long base = o * len * inner + i;
        T mx = xv[base];
        for (long t = 1; t < len; ++t) mx = std::max(mx, xv[base + t * inner]);
        T sum = 0;
        for (long t = 0; t < len; ++t) {
          T e = std::exp(xv[base + t * inner] - mx);
          out[base + t * inner] = e;
          sum += e;
        }
        for (long t = 0; t < len; ++t) out[base + t * inner] /= sum;
      }
    }
  };
  if (x.numel() < 16384)
    soft_rows(0, outer);
  else
    parallel_for(outer, soft_rows);
  auto px = x.node();
  return Tensor<T>::make_op(x.shape(), std::move(out), {px},
                            [px, outer, inner, len](Node<T>& nd) {
                              // dx = (g - <g, y>) * y per slice
                              auto back_rows = [&](long o0, long o1) {
                                for (long o = o0; o < o1; ++o) {
                                  for (long i = 0; i < inner; ++i) {
                                    const long base = o * len * inner + i;
                                    T dot = 0;
                                    for (long t = 0; t < len; ++t)
                                      dot += nd.grad[base + t * inner] * nd.val[base + t * inner];
                                    for (long t = 0; t < len; ++t) {
                                      const long k = base + t * inner;
                                      px->grad[k] += (nd.grad[k] - dot) * nd.val[k];
                                    }
                                  }
                                }
                              };
                              if (nd.val.size() < 16384)
                                back_rows(0, outer);
                              else
                                parallel_for(outer, back_rows);
                            });
}

// Layer normalization over the last axis with affine parameters.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = static_cast<T>(1e-6)) {
  const long rows = x.rows(), c = x.last_dim();
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layernorm: affine params must have " + std::to_string(c) + " entries");
  if (!(eps > T(0))) throw DimensionError("layernorm: eps must be positive");
  std::vector<T> out(x.val().size());
  auto mean = std::make_shared<std::vector<T>>(rows);
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* xv = x.val().data();
  const T* gv = gamma.val().data();
  const T* bv = beta.val().data();
  auto norm_rows = [&](long r0, long r1) {
    for (long r = r0; r < r1; ++r) {
      const T* row = xv + r * c;
      T mu = 0;
      for (long j = 0; j < c; ++j) mu += row[j];
      mu /= static_cast<T>(c);
      T var = 0;
      for (long j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<T>(c);
      const T rs = T(1) / std::sqrt(var + eps);
      (*mean)[r] = mu;
      (*rstd)[r] = rs;
      for (long j = 0; j < c; ++j) out[r * c + j] = (row[j] - mu) * rs * gv[j] + bv[j];
    }
  };
  if (x.numel() < 16384)
    norm_rows(0, rows);
  else
    parallel_for(rows, norm_rows);
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {px, pg, pb}, [px, pg, pb, mean, rstd, rows, c](Node<T>& nd) {
        if (px->requires_grad) {
          auto dx_rows = [&](long r0, long r1) {
            const T inv_c = T(1) / static_cast<T>(c);
            for (long r = r0; r < r1; ++r) {
              const T mu = (*mean)[r], rs = (*rstd)[r];
              const T* row = px->val.data() + r * c;
              const T* g = nd.grad.data() + r * c;
              T sum_gh = 0, sum_ghx = 0;
              for (long j = 0; j < c; ++j) {
                const T xhat = (row[j] - mu) * rs;
                const T gh = g[j] * pg->val[j];
                sum_gh += gh;
                sum_ghx += gh * xhat;
              }
              for (long j = 0; j < c; ++j) {
                const T xhat = (row[j] - mu) * rs;
                const T gh = g[j] * pg->val[j];
                px->grad[r * c + j] += rs * (gh - inv_c * sum_gh - xhat * inv_c * sum_ghx);
              }
            }
          };
          if (nd.val.size() < 16384)
            dx_rows(0, rows);
          else
            parallel_for(rows, dx_rows);
        }
        if (pg->requires_grad || pb->requires_grad) {
          // column-parallel affine grads keep a fixed per-column sum order
          auto affine_cols = [&](long j0, long j1) {
            for (long j = j0; j < j1; ++j) {
              T sg = 0, sb = 0;
              for (long r = 0; r < rows; ++r) {
                const T xhat = (px->val[r * c + j] - (*mean)[r]) * (*rstd)[r];
                sg += nd.grad[r * c + j] * xhat;
                sb += nd.grad[r * c + j];
              }
              if (pg->requires_grad) pg->grad[j] += sg;
              if (pb->requires_grad) pb->grad[j] += sb;
            }
          };
          if (nd.val.size() < 16384)
            affine_cols(0, c);
          else
            parallel_for(c, affine_cols);
        }
      });
}

// ---------------------------------------------------------------- image ops

// Extracts K x K patches with stride S and zero padding P from an {H, W, C}
// tensor into {H', W', K*K*C}; a linear layer on the result is a strided
// convolution.
template <typename T>
Tensor<T> unfold(const Tensor<T>& x, int k, int s, int p) {
  if (x.rank() != 3) throw DimensionError("unfold: expected {H,W,C}, got " + shape_str(x.shape()));
  if (k < 1 || s < 1 || p < 0) throw DimensionError("unfold: require K>=1, S>=1, P>=0");
  const int h = x.size(0), w = x.size(1), c = x.size(2);
  const int ho = (h + 2 * p - k) / s + 1;
  const int wo = (w + 2 * p - k) / s + 1;
  if (h + 2 * p < k || w + 2 * p < k || ho <= 0 || wo <= 0)
    throw DimensionError("unfold: non-positive output size for " + shape_str(x.shape()));
  const long patch = static_cast<long>(k) * k * c;
  std::vector<T> out(static_cast<long>(ho) * wo * patch, T(0));
  const T* xv = x.val().data();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      T* slot = out.data() + (static_cast<long>(oy) * wo + ox) * patch;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s - p + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s - p + kx;
          if (ix < 0 || ix >= w) continue;
          std::copy_n(xv + (static_cast<long>(iy) * w + ix) * c, c,
                      slot + (static_cast<long>(ky) * k + kx) * c);
        }
      }
    }
  }
  auto px = x.node();
  return Tensor<T>::make_op({ho, wo, static_cast<int>(patch)}, std::move(out), {px},
                            [px, h, w, c, k, s, p, ho, wo, patch](Node<T>& nd) {
                              for (int oy = 0; oy < ho; ++oy)
                                for (int ox = 0; ox < wo; ++ox) {
                                  const T* slot =
                                      nd.grad.data() + (static_cast<long>(oy) * wo + ox) * patch;
                                  for (int ky = 0; ky < k; ++ky) {
                                    const int iy = oy * s - p + ky;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int kx = 0; kx < k; ++kx) {
                                      const int ix = ox * s - p + kx;
                                      if (ix < 0 || ix >= w) continue;
                                      T* dst = px->grad.data() +
                                               (static_cast<long>(iy) * w + ix) * c;
                                      const T* src = slot + (static_cast<long>(ky) * k + kx) * c;
                                      for (int j = 0; j < c; ++j) dst[j] += src[j];
                                    }
                                  }
                                }
                            });
}

// Non-overlapping r x r mean pooling; partial border windows average over
// the pixels actually covered.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int r) {
  if (x.rank() != 3) throw DimensionError("avg_pool2d: expected {H,W,C}");
  if (r < 1) throw DimensionError("avg_pool2d: ratio must be >= 1");
  const int h = x.size(0), w = x.size(1), c = x.size(2);
  const int ho = (h + r - 1) / r, wo = (w + r - 1) / r;
  std::vector<T> out(static_cast<long>(ho) * wo * c, T(0));
  const T* xv = x.val().data();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const int y1 = std::min((oy + 1) * r, h), x1 = std::min((ox + 1) * r, w);
      const T inv = T(1) / static_cast<T>((y1 - oy * r) * (x1 - ox * r));
      T* dst = out.data() + (static_cast<long>(oy) * wo + ox) * c;
      for (int iy = oy * r; iy < y1; ++iy)
        for (int ix = ox * r; ix < x1; ++ix) {
          const T* src = xv + (static_cast<long>(iy) * w + ix) * c;
          for (int j = 0; j < c; ++j) dst[j] += src[j] * inv;
        }
    }
  }
  auto px = x.node();
  return Tensor<T>::make_op({ho, wo, c}, std::move(out), {px},
                            [px, h, w, c, r, ho, wo](Node<T>& nd) {
                              for (int oy = 0; oy < ho; ++oy)
                                for (int ox = 0; ox < wo; ++ox) {
                                  const int y1 = std::min((oy + 1) * r, h),
                                            x1 = std::min((ox + 1) * r, w);
                                  const T inv =
                                      T(1) / static_cast<T>((y1 - oy * r) * (x1 - ox * r));
                                  const T* g =
                                      nd.grad.data() + (static_cast<long>(oy) * wo + ox) * c;
                                  for (int iy = oy * r; iy < y1; ++iy)
                                    for (int ix = ox * r; ix < x1; ++ix) {
                                      T* dst =
                                          px->grad.data() + (static_cast<long>(iy) * w + ix) * c;
                                      for (int j = 0; j < c; ++j) dst[j] += g[j] * inv;
                                    }
                                }
                            });
}

// Bilinear resize of {H, W, C} with align_corners=false sampling.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int ho, int wo) {
  if (x.rank() != 3) throw DimensionError("bilinear_resize: expected {H,W,C}");
  if (ho < 1 || wo < 1) throw DimensionError("bilinear_resize: output must be positive");
  const int h = x.size(0), w = x.size(1), c = x.size(2);
  struct Tap {
    int i0, i1;
    T w1;  // weight of i1; i0 gets 1-w1
  };
  auto make_taps = [](int in, int out) {
    std::vector<Tap> taps(out);
    const double sc = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double s = (o + 0.5) * sc - 0.5;
      if (s < 0) s = 0;
      if (s > in - 1) s = in - 1;
      int i0 = static_cast<int>(s);
      if (i0 > in - 1) i0 = in - 1;
      int i1 = std::min(i0 + 1, in - 1);
      taps[o] = {i0, i1, static_cast<T>(s - i0)};
    }
    return taps;
  };
  const auto ty = make_taps(h, ho), tx = make_taps(w, wo);
  std::vector<T> out(static_cast<long>(ho) * wo * c);
  const T* xv = x.val().data();
  auto resize_rows = [&](long oy0, long oy1) {
  for (long oy = oy0; oy < oy1; ++oy) {
    const auto& a = ty[oy];
    for (int ox = 0; ox < wo; ++ox) {
      const auto& b = tx[ox];
      const T w00 = (1 - a.w1) * (1 - b.w1), w01 = (1 - a.w1) * b.w1;
      const T w10 = a.w1 * (1 - b.w1), w11 = a.w1 * b.w1;
      const T* p00 = xv + (static_cast<long>(a.i0) * w + b.i0) * c;
      const T* p01 = xv + (static_cast<long>(a.i0) * w + b.i1) * c;
      const T* p10 = xv + (static_cast<long>(a.i1) * w + b.i0) * c;
      const T* p11 = xv + (static_cast<long>(a.i1) * w + b.i1) * c;
      T* dst = out.data() + (static_cast<long>(oy) * wo + ox) * c;
      for (int j = 0; j < c; ++j)
        dst[j] = w00 * p00[j] + w01 * p01[j] + w10 * p10[j] + w11 * p11[j];
    }
  }
  };
  if (static_cast<long>(ho) * wo * c < 16384)
    resize_rows(0, ho);
  else
    parallel_for(ho, resize_rows);
  auto px = x.node();
  return Tensor<T>::make_op(
      {ho, wo, c}, std::move(out), {px}, [px, ty, tx, w, c, ho, wo](Node<T>& nd) {
        for (int oy = 0; oy < ho; ++oy) {
          const auto& a = ty[oy];
          for (int ox = 0; ox < wo; ++ox) {
            const auto& b = tx[ox];
            const T w00 = (1 - a.w1) * (1 - b.w1), w01 = (1 - a.w1) * b.w1;
            const T w10 = a.w1 * (1 - b.w1), w11 = a.w1 * b.w1;
            const T* g = nd.grad.data() + (static_cast<long>(oy) * wo + ox) * c;
            T* p00 = px->grad.data() + (static_cast<long>(a.i0) * w + b.i0) * c;
            T* p01 = px->grad.data() + (static_cast<long>(a.i0) * w + b.i1) * c;
            T* p10 = px->grad.data() + (static_cast<long>(a.i1) * w + b.i0) * c;
            T* p11 = px->grad.data() + (static_cast<long>(a.i1) * w + b.i1) * c;
            for (int j = 0; j < c; ++j) {
              p00[j] += w00 * g[j];
              p01[j] += w01 * g[j];
              p10[j] += w10 * g[j];
              p11[j] += w11 * g[j];
            }
          }
        }
      });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.val()) s += v;
  auto px = x.node();
  return Tensor<T>::make_op({1}, {s}, {px}, [px](Node<T>& nd) {
    for (auto& g : px->grad) g += nd.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Mean negative log-likelihood over rows whose label is not `ignore`.
// Probabilities are clamped at 1e-12 inside the log; clamped entries get
// zero gradient. Sets *all_ignored when no row contributes.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& probs, const std::vector<int>& labels,
                             int ignore = 255, bool* all_ignored = nullptr) {
  const long rows = probs.rows();
  const long k = probs.last_dim();
  if (static_cast<long>(labels.size()) != rows)
    throw DimensionError("cross_entropy_mean: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
  double acc = 0;
  long count = 0;
  for (long r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y == ignore) continue;
    if (y < 0 || y >= k)
      throw DimensionError("cross_entropy_mean: label " + std::to_string(y) + " out of " +
                           std::to_string(k) + " classes");
    acc -= std::log(std::max(static_cast<double>(probs.val()[r * k + y]), kLogClamp));
    ++count;
  }
  if (all_ignored) *all_ignored = (count == 0);
  const T value = count ? static_cast<T>(acc / count) : T(0);
  auto pp = probs.node();
  return Tensor<T>::make_op({1}, {value}, {pp}, [pp, labels, ignore, k, count](Node<T>& nd) {
    if (count == 0) return;
    const T inv = nd.grad[0] / static_cast<T>(count);
    for (long r = 0; r < static_cast<long>(labels.size()); ++r) {
      const int y = labels[r];
      if (y == ignore) continue;
      const T p = pp->val[r * k + y];
      if (static_cast<double>(p) > kLogClamp) pp->grad[r * k + y] -= inv / p;
    }
  });
}

// Per-class mean of feature rows selected by an integer label map. Returns
// {K, D}; classes with no pixels produce zero rows. counts_out (length K)
// reports the number of contributing rows per class.
template <typename T>
Tensor<T> masked_mean_rows(const Tensor<T>& feat, const std::vector<int>& labels, int k,
                           std::vector<long>* counts_out = nullptr, int ignore = 255) {
  const long rows = feat.rows();
  const long d = feat.last_dim();
  if (static_cast<long>(labels.size()) != rows)
    throw DimensionError("masked_mean_rows: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
  auto counts = std::make_shared<std::vector<long>>(k, 0);
  std::vector<T> out(static_cast<long>(k) * d, T(0));
  for (long r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y == ignore) continue;
    if (y < 0 || y >= k)
      throw DimensionError("masked_mean_rows: label " + std::to_string(y) + " out of range");
    ++(*counts)[y];
    const T* src = feat.val().data() + r * d;
    T* dst = out.data() + static_cast<long>(y) * d;
    for (long j = 0; j < d; ++j) dst[j] += src[j];
  }
  for (int i = 0; i < k; ++i)
    if ((*counts)[i])
      for (long j = 0; j < d; ++j) out[static_cast<long>(i) * d + j] /= static_cast<T>((*counts)[i]);
  if (counts_out) *counts_out = *counts;
  auto pf = feat.node();
  return Tensor<T>::make_op({k, static_cast<int>(d)}, std::move(out), {pf},
                            [pf, labels, counts, d, ignore](Node<T>& nd) {
                              for (long r = 0; r < static_cast<long>(labels.size()); ++r) {
                                const int y = labels[r];
                                if (y == ignore || !(*counts)[y]) continue;
                                const T inv = T(1) / static_cast<T>((*counts)[y]);
                                const T* g = nd.grad.data() + static_cast<long>(y) * d;
                                T* dst = pf->grad.data() + r * d;
                                for (long j = 0; j < d; ++j) dst[j] += g[j] * inv;
                              }
                            });
}

// ---------------------------------------------------------------- construction

template <typename T>
Tensor<T> rng_uniform(Rng& rng, std::vector<int> shape, T lo, T hi, bool requires_grad = false) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.val()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
Tensor<T> rng_normal(Rng& rng, std::vector<int> shape, T mean, T stddev,
                     bool requires_grad = false) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.val()) v = static_cast<T>(rng.normal(mean, stddev));
  return t;
}

template <typename T>
long param_count(const std::vector<Tensor<T>>& params) {
  long n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

// Per-pixel argmax over the last axis (not differentiable).
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  const long rows = x.rows(), k = x.last_dim();
  std::vector<int> out(rows);
  for (long r = 0; r < rows; ++r) {
    const T* row = x.val().data() + r * k;
    int best = 0;
    for (long j = 1; j < k; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    out[r] = best;
  }
  return out;
}

}  // namespace datr::numkit
