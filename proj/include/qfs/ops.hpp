#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "qfs/common.hpp"
#include "qfs/random.hpp"
#include "qfs/tensor.hpp"

namespace qfs {

namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n], row-major contiguous. The i-k-j ordering keeps
// the inner loop contiguous in B and C so it vectorizes without reassociating
// reductions (bit-deterministic under -O3).
template <typename T>
inline void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n,
                    bool accumulate) {
  if (!accumulate) std::fill(C, C + m * n, T(0));
  for (int64_t i = 0; i < m; ++i) {
    const T* a_row = A + i * k;
    T* c_row = C + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T a = a_row[p];
      if (a == T(0)) continue;
      const T* b_row = B + p * n;
      for (int64_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

template <typename T>
inline std::vector<T> transpose_copy(const T* X, int64_t rows, int64_t cols) {
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) out[j * rows + i] = X[i * cols + j];
  return out;
}

inline void check_2d(const Shape& s, const char* who) {
  check(s.size() == 2, std::string(who) + " expects a rank-2 tensor, got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic (shapes must match exactly; the only broadcast is
// scalar-vs-tensor)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <typename T>
Tensor<T> binary_op(Tensor<T> a, Tensor<T> b, BinKind kind, const char* name) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const Shape out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const int64_t n = shape_numel(out_shape);
  std::vector<T> out(static_cast<size_t>(n));
  const T* av = a.data();
  const T* bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    const T x = a_scalar ? av[0] : av[i];
    const T y = b_scalar ? bv[0] : bv[i];
    switch (kind) {
      case BinKind::Add: out[i] = x + y; break;
      case BinKind::Sub: out[i] = x - y; break;
      case BinKind::Mul: out[i] = x * y; break;
    }
  }
  return Tensor<T>::make_op(
      out_shape, std::move(out), {a, b},
      [a, b, kind, a_scalar, b_scalar, n](const detail::Node<T>& o) mutable {
        const T* g = o.grad.data();
        if (a.requires_grad()) {
          auto& ga = a.mutable_grad();
          for (int64_t i = 0; i < n; ++i) {
            T d = g[i];
            if (kind == BinKind::Mul) d *= b_scalar ? b.data()[0] : b.data()[i];
            ga[a_scalar ? 0 : i] += d;
          }
        }
        if (b.requires_grad()) {
          auto& gb = b.mutable_grad();
          for (int64_t i = 0; i < n; ++i) {
            T d = g[i];
            if (kind == BinKind::Sub) d = -d;
            if (kind == BinKind::Mul) {
              d = g[i] * (a_scalar ? a.data()[0] : a.data()[i]);
            }
            gb[b_scalar ? 0 : i] += d;
          }
        }
      });
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}

template <typename T>
Tensor<T> scale(Tensor<T> x, double c) {
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = x.data()[i] * static_cast<T>(c);
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, c, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i)
                                gx[i] += o.grad[i] * static_cast<T>(c);
                            });
}

template <typename T>
Tensor<T> add_const(Tensor<T> x, double c) {
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = x.data()[i] + static_cast<T>(c);
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i) gx[i] += o.grad[i];
                            });
}

// c - x
template <typename T>
Tensor<T> rsub_const(Tensor<T> x, double c) {
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = static_cast<T>(c) - x.data()[i];
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i) gx[i] -= o.grad[i];
                            });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  detail::check_2d(a.shape(), "matmul lhs");
  detail::check_2d(b.shape(), "matmul rhs");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(static_cast<size_t>(m * n));
  detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  return Tensor<T>::make_op(
      {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const detail::Node<T>& o) mutable {
        if (a.requires_grad()) {
          // dA = dC * B^T
          auto bt = detail::transpose_copy(b.data(), k, n);
          detail::gemm_nn(o.grad.data(), bt.data(), a.mutable_grad().data(), m, n, k, true);
        }
        if (b.requires_grad()) {
          // dB = A^T * dC
          auto at = detail::transpose_copy(a.data(), m, k);
          detail::gemm_nn(at.data(), o.grad.data(), b.mutable_grad().data(), k, m, n, true);
        }
      });
}

// a[m,k] * b[n,k]^T -> [m,n]; the layout used by linear layers (weights stored
// [out,in]) and attention scores.
template <typename T>
Tensor<T> matmul_nt(Tensor<T> a, Tensor<T> b) {
  detail::check_2d(a.shape(), "matmul_nt lhs");
  detail::check_2d(b.shape(), "matmul_nt rhs");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner extents disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  auto bt = detail::transpose_copy(b.data(), n, k);
  std::vector<T> out(static_cast<size_t>(m * n));
  detail::gemm_nn(a.data(), bt.data(), out.data(), m, k, n, false);
  return Tensor<T>::make_op(
      {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const detail::Node<T>& o) mutable {
        if (a.requires_grad()) {
          // dA = dC * B
          detail::gemm_nn(o.grad.data(), b.data(), a.mutable_grad().data(), m, n, k, true);
        }
        if (b.requires_grad()) {
          // dB = dC^T * A
          auto gt = detail::transpose_copy(o.grad.data(), m, n);
          detail::gemm_nn(gt.data(), a.data(), b.mutable_grad().data(), n, m, k, true);
        }
      });
}

template <typename T>
Tensor<T> transpose(Tensor<T> x) {
  detail::check_2d(x.shape(), "transpose");
  const int64_t m = x.dim(0), n = x.dim(1);
  auto out = detail::transpose_copy(x.data(), m, n);
  return Tensor<T>::make_op({n, m}, std::move(out), {x},
                            [x, m, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i)
                                for (int64_t j = 0; j < m; ++j)
                                  gx[j * n + i] += o.grad[i * m + j];
                            });
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(Tensor<T> x) {
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i)
                                if (x.data()[i] > T(0)) gx[i] += o.grad[i];
                            });
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> x) {
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i) {
                                const T y = o.values[i];
                                gx[i] += o.grad[i] * y * (T(1) - y);
                              }
                            });
}

// ELU(x)+1 with alpha=1: x+1 for x >= 0, exp(x) for x < 0. The negative branch
// is clamped to the smallest normal so the output stays strictly positive even
// when exp underflows; linear-attention normalizers rely on that.
template <typename T>
Tensor<T> elu_plus_one(Tensor<T> x) {
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const T v = x.data()[i];
    out[i] = v >= T(0) ? v + T(1) : std::max(std::exp(v), std::numeric_limits<T>::min());
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i) {
                                const T d = x.data()[i] >= T(0) ? T(1) : o.values[i];
                                gx[i] += o.grad[i] * d;
                              }
                            });
}

template <typename T>
Tensor<T> exp_t(Tensor<T> x) {
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = std::exp(x.data()[i]);
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i) gx[i] += o.grad[i] * o.values[i];
                            });
}

// softmax over the last axis; accepts rank-1 (one row) or rank-2 tensors.
template <typename T>
Tensor<T> softmax_lastdim(Tensor<T> x) {
  check(x.rank() == 1 || x.rank() == 2,
        "softmax_lastdim expects rank 1 or 2, got " + shape_str(x.shape()));
  const int64_t cols = x.shape().back();
  const int64_t rows = x.numel() / cols;
  std::vector<T> out(static_cast<size_t>(x.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T* o = out.data() + r * cols;
    T mx = in[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    T sum = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (int64_t j = 0; j < cols; ++j) o[j] /= sum;
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, rows, cols](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t r = 0; r < rows; ++r) {
                                const T* p = o.values.data() + r * cols;
                                const T* g = o.grad.data() + r * cols;
                                T dot = T(0);
                                for (int64_t j = 0; j < cols; ++j) dot += p[j] * g[j];
                                for (int64_t j = 0; j < cols; ++j)
                                  gx[r * cols + j] += p[j] * (g[j] - dot);
                              }
                            });
}

// y[i,:] = gain * x[i,:] / sqrt(mean(x[i,:]^2) + eps)
template <typename T>
Tensor<T> rms_norm(Tensor<T> x, Tensor<T> gain, double eps = 1e-6) {
  detail::check_2d(x.shape(), "rms_norm");
  const int64_t rows = x.dim(0), d = x.dim(1);
  check(gain.rank() == 1 && gain.dim(0) == d,
        "rms_norm: gain shape " + shape_str(gain.shape()) + " does not match width " +
            std::to_string(d));
  std::vector<T> out(static_cast<size_t>(rows * d));
  std::vector<T> inv_rms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    T ss = T(0);
    for (int64_t j = 0; j < d; ++j) ss += in[j] * in[j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
    inv_rms[r] = inv;
    for (int64_t j = 0; j < d; ++j) out[r * d + j] = gain.data()[j] * in[j] * inv;
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, gain},
      [x, gain, rows, d, inv_rms](const detail::Node<T>& o) mutable {
        for (int64_t r = 0; r < rows; ++r) {
          const T* in = x.data() + r * d;
          const T* g = o.grad.data() + r * d;
          const T inv = inv_rms[r];
          if (x.requires_grad()) {
            T dot = T(0);  // sum_j g_j * gain_j * x_j
            for (int64_t j = 0; j < d; ++j) dot += g[j] * gain.data()[j] * in[j];
            auto& gx = x.mutable_grad();
            const T c = dot * inv * inv * inv / static_cast<T>(d);
            for (int64_t j = 0; j < d; ++j)
              gx[r * d + j] += g[j] * gain.data()[j] * inv - c * in[j];
          }
          if (gain.requires_grad()) {
            auto& gg = gain.mutable_grad();
            for (int64_t j = 0; j < d; ++j) gg[j] += g[j] * in[j] * inv;
          }
        }
      });
}

// Inverted-scaling dropout: at train time kept entries are divided by the
// keep probability, so evaluation is the identity.
template <typename T>
Tensor<T> dropout(Tensor<T> x, double rate, Rng& rng, bool train) {
  check(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0,1)");
  if (!train || rate == 0.0) return x;
  const int64_t n = x.numel();
  const T inv_keep = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  std::vector<T> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const T m = rng.bernoulli(rate) ? T(0) : inv_keep;
    (*mask)[i] = m;
    out[i] = x.data()[i] * m;
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, mask, n](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t i = 0; i < n; ++i) gx[i] += o.grad[i] * (*mask)[i];
                            });
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape new_shape) {
  check(shape_numel(new_shape) == x.numel(),
        "reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
  std::vector<T> out(x.values());
  return Tensor<T>::make_op(std::move(new_shape), std::move(out), {x},
                            [x](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                            });
}

// axis 0 stacks rows, axis 1 stacks columns; all inputs rank-2.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  check(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  for (const auto& p : parts) detail::check_2d(p.shape(), "concat");
  int64_t rows = 0, cols = 0;
  if (axis == 0) {
    cols = parts[0].dim(1);
    for (const auto& p : parts) {
      check(p.dim(1) == cols, "concat axis 0: column mismatch " + shape_str(p.shape()));
      rows += p.dim(0);
    }
  } else {
    rows = parts[0].dim(0);
    for (const auto& p : parts) {
      check(p.dim(0) == rows, "concat axis 1: row mismatch " + shape_str(p.shape()));
      cols += p.dim(1);
    }
  }
  std::vector<T> out(static_cast<size_t>(rows * cols));
  if (axis == 0) {
    int64_t at = 0;
    for (const auto& p : parts) {
      std::copy(p.data(), p.data() + p.numel(), out.data() + at);
      at += p.numel();
    }
  } else {
    int64_t col_at = 0;
    for (const auto& p : parts) {
      const int64_t pc = p.dim(1);
      for (int64_t r = 0; r < rows; ++r)
        std::copy(p.data() + r * pc, p.data() + (r + 1) * pc, out.data() + r * cols + col_at);
      col_at += pc;
    }
  }
  std::vector<Tensor<T>> parents = parts;
  return Tensor<T>::make_op(
      {rows, cols}, std::move(out), parents,
      [parents, axis, rows, cols](const detail::Node<T>& o) mutable {
        if (axis == 0) {
          int64_t at = 0;
          for (auto& p : parents) {
            if (p.requires_grad()) {
              auto& gp = p.mutable_grad();
              for (int64_t i = 0; i < p.numel(); ++i) gp[i] += o.grad[at + i];
            }
            at += p.numel();
          }
        } else {
          int64_t col_at = 0;
          for (auto& p : parents) {
            const int64_t pc = p.dim(1);
            if (p.requires_grad()) {
              auto& gp = p.mutable_grad();
              for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < pc; ++j)
                  gp[r * pc + j] += o.grad[r * cols + col_at + j];
            }
            col_at += pc;
          }
        }
      });
}

template <typename T>
Tensor<T> slice_rows(Tensor<T> x, int64_t begin, int64_t end) {
  detail::check_2d(x.shape(), "slice_rows");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  check(begin >= 0 && begin < end && end <= rows,
        "slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
            ") out of bounds for " + shape_str(x.shape()));
  std::vector<T> out(x.data() + begin * cols, x.data() + end * cols);
  return Tensor<T>::make_op({end - begin, cols}, std::move(out), {x},
                            [x, begin, cols](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              const int64_t off = begin * cols;
                              for (size_t i = 0; i < o.grad.size(); ++i)
                                gx[off + i] += o.grad[i];
                            });
}

template <typename T>
Tensor<T> slice_cols(Tensor<T> x, int64_t begin, int64_t end) {
  detail::check_2d(x.shape(), "slice_cols");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  check(begin >= 0 && begin < end && end <= cols,
        "slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
            ") out of bounds for " + shape_str(x.shape()));
  const int64_t w = end - begin;
  std::vector<T> out(static_cast<size_t>(rows * w));
  for (int64_t r = 0; r < rows; ++r)
    std::copy(x.data() + r * cols + begin, x.data() + r * cols + end, out.data() + r * w);
  return Tensor<T>::make_op({rows, w}, std::move(out), {x},
                            [x, begin, rows, cols, w](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t r = 0; r < rows; ++r)
                                for (int64_t j = 0; j < w; ++j)
                                  gx[r * cols + begin + j] += o.grad[r * w + j];
                            });
}

template <typename T>
Tensor<T> embedding_lookup(Tensor<T> table, const std::vector<int>& ids) {
  detail::check_2d(table.shape(), "embedding_lookup");
  const int64_t vocab = table.dim(0), d = table.dim(1);
  const int64_t L = static_cast<int64_t>(ids.size());
  check(L >= 1, "embedding_lookup: empty id list");
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw DataError("embedding_lookup: token id " + std::to_string(id) +
                      " outside vocab of " + std::to_string(vocab));
    }
  }
  std::vector<T> out(static_cast<size_t>(L * d));
  for (int64_t t = 0; t < L; ++t)
    std::copy(table.data() + ids[t] * d, table.data() + (ids[t] + 1) * d, out.data() + t * d);
  return Tensor<T>::make_op({L, d}, std::move(out), {table},
                            [table, ids, d, L](const detail::Node<T>& o) mutable {
                              if (!table.requires_grad()) return;
                              auto& gt = table.mutable_grad();
                              for (int64_t t = 0; t < L; ++t)
                                for (int64_t j = 0; j < d; ++j)
                                  gt[ids[t] * d + j] += o.grad[t * d + j];
                            });
}

// Arithmetic mean of the rows selected by mask. The query span must be
// non-empty.
template <typename T>
Tensor<T> mean_pool(Tensor<T> x, const std::vector<uint8_t>& mask) {
  detail::check_2d(x.shape(), "mean_pool");
  const int64_t rows = x.dim(0), d = x.dim(1);
  check(static_cast<int64_t>(mask.size()) == rows,
        "mean_pool: mask length " + std::to_string(mask.size()) + " vs rows " +
            std::to_string(rows));
  int64_t count = 0;
  for (uint8_t m : mask) count += m ? 1 : 0;
  if (count == 0) throw ShapeError("mean_pool: mask selects no rows");
  std::vector<T> out(static_cast<size_t>(d), T(0));
  for (int64_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (int64_t j = 0; j < d; ++j) out[j] += x.data()[r * d + j];
  }
  const T inv = T(1) / static_cast<T>(count);
  for (auto& v : out) v *= inv;
  return Tensor<T>::make_op({d}, std::move(out), {x},
                            [x, mask, rows, d, inv](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t r = 0; r < rows; ++r) {
                                if (!mask[r]) continue;
                                for (int64_t j = 0; j < d; ++j)
                                  gx[r * d + j] += o.grad[j] * inv;
                              }
                            });
}

template <typename T>
Tensor<T> sum_all(Tensor<T> x) {
  T s = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) s += x.data()[i];
  return Tensor<T>::make_op({1}, {s}, {x}, [x](const detail::Node<T>& o) mutable {
    if (!x.requires_grad()) return;
    auto& gx = x.mutable_grad();
    for (auto& g : gx) g += o.grad[0];
  });
}

// column sums: [m,n] -> [n]
template <typename T>
Tensor<T> sum_axis0(Tensor<T> x) {
  detail::check_2d(x.shape(), "sum_axis0");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(static_cast<size_t>(cols), T(0));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < cols; ++j) out[j] += x.data()[r * cols + j];
  return Tensor<T>::make_op({cols}, std::move(out), {x},
                            [x, rows, cols](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t r = 0; r < rows; ++r)
                                for (int64_t j = 0; j < cols; ++j)
                                  gx[r * cols + j] += o.grad[j];
                            });
}

// x[m,n] + bias[n] on every row (explicit row broadcast).
template <typename T>
Tensor<T> add_rows(Tensor<T> x, Tensor<T> bias) {
  detail::check_2d(x.shape(), "add_rows");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  check(bias.rank() == 1 && bias.dim(0) == cols,
        "add_rows: bias shape " + shape_str(bias.shape()) + " vs row width " +
            std::to_string(cols));
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < cols; ++j) out[r * cols + j] = x.data()[r * cols + j] + bias.data()[j];
  return Tensor<T>::make_op(x.shape(), std::move(out), {x, bias},
                            [x, bias, rows, cols](const detail::Node<T>& o) mutable {
                              if (x.requires_grad()) {
                                auto& gx = x.mutable_grad();
                                for (size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                              }
                              if (bias.requires_grad()) {
                                auto& gb = bias.mutable_grad();
                                for (int64_t r = 0; r < rows; ++r)
                                  for (int64_t j = 0; j < cols; ++j)
                                    gb[j] += o.grad[r * cols + j];
                              }
                            });
}

namespace detail {

template <typename T>
Tensor<T> rowscalar_op(Tensor<T> x, Tensor<T> s, bool divide, const char* name) {
  check_2d(x.shape(), name);
  const int64_t rows = x.dim(0), cols = x.dim(1);
  check(s.rank() == 1 && s.dim(0) == rows,
        std::string(name) + ": per-row scalar shape " + shape_str(s.shape()) + " vs rows " +
            std::to_string(rows));
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r) {
    const T f = divide ? T(1) / s.data()[r] : s.data()[r];
    for (int64_t j = 0; j < cols; ++j) out[r * cols + j] = x.data()[r * cols + j] * f;
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, s},
      [x, s, rows, cols, divide](const detail::Node<T>& o) mutable {
        for (int64_t r = 0; r < rows; ++r) {
          const T sv = s.data()[r];
          const T f = divide ? T(1) / sv : sv;
          if (x.requires_grad()) {
            auto& gx = x.mutable_grad();
            for (int64_t j = 0; j < cols; ++j) gx[r * cols + j] += o.grad[r * cols + j] * f;
          }
          if (s.requires_grad()) {
            auto& gs = s.mutable_grad();
            T acc = T(0);
            for (int64_t j = 0; j < cols; ++j)
              acc += o.grad[r * cols + j] * x.data()[r * cols + j];
            gs[r] += divide ? -acc / (sv * sv) : acc;
          }
        }
      });
}

}  // namespace detail

// y[i,:] = x[i,:] * s[i]
template <typename T>
Tensor<T> mul_rowscalar(Tensor<T> x, Tensor<T> s) {
  return detail::rowscalar_op(x, s, false, "mul_rowscalar");
}

// y[i,:] = x[i,:] / s[i]
template <typename T>
Tensor<T> div_rowscalar(Tensor<T> x, Tensor<T> s) {
  return detail::rowscalar_op(x, s, true, "div_rowscalar");
}

// ---------------------------------------------------------------------------
// rotary position embedding over a per-head block [L, d_head], d_head even.
// Each coordinate pair (2i, 2i+1) rotates by pos * base^(-2i/d_head).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> rope_apply(Tensor<T> x, const std::vector<int64_t>& positions,
                     double base = 10000.0) {
  detail::check_2d(x.shape(), "rope_apply");
  const int64_t L = x.dim(0), d = x.dim(1);
  if (d % 2 != 0) throw ConfigError("rope_apply: head width must be even, got " + std::to_string(d));
  check(static_cast<int64_t>(positions.size()) == L,
        "rope_apply: positions length " + std::to_string(positions.size()) + " vs rows " +
            std::to_string(L));
  const int64_t half = d / 2;
  auto angles = std::make_shared<std::vector<T>>(static_cast<size_t>(L * half * 2));
  std::vector<T> out(static_cast<size_t>(L * d));
  for (int64_t t = 0; t < L; ++t) {
    for (int64_t i = 0; i < half; ++i) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double ang = static_cast<double>(positions[t]) * theta;
      const T c = static_cast<T>(std::cos(ang));
      const T s = static_cast<T>(std::sin(ang));
      (*angles)[(t * half + i) * 2] = c;
      (*angles)[(t * half + i) * 2 + 1] = s;
      const T x0 = x.data()[t * d + 2 * i];
      const T x1 = x.data()[t * d + 2 * i + 1];
      out[t * d + 2 * i] = x0 * c - x1 * s;
      out[t * d + 2 * i + 1] = x0 * s + x1 * c;
    }
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [x, angles, L, d, half](const detail::Node<T>& o) mutable {
                              if (!x.requires_grad()) return;
                              auto& gx = x.mutable_grad();
                              for (int64_t t = 0; t < L; ++t) {
                                for (int64_t i = 0; i < half; ++i) {
                                  const T c = (*angles)[(t * half + i) * 2];
                                  const T s = (*angles)[(t * half + i) * 2 + 1];
                                  const T g0 = o.grad[t * d + 2 * i];
                                  const T g1 = o.grad[t * d + 2 * i + 1];
                                  gx[t * d + 2 * i] += g0 * c + g1 * s;
                                  gx[t * d + 2 * i + 1] += -g0 * s + g1 * c;
                                }
                              }
                            });
}

// ---------------------------------------------------------------------------
// mean cross-entropy over masked positions (next-token objective).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> masked_cross_entropy(Tensor<T> logits, const std::vector<int>& targets,
                               const std::vector<uint8_t>& mask) {
  detail::check_2d(logits.shape(), "masked_cross_entropy");
  const int64_t L = logits.dim(0), V = logits.dim(1);
  check(static_cast<int64_t>(targets.size()) == L && static_cast<int64_t>(mask.size()) == L,
        "masked_cross_entropy: targets/mask length must match logit rows");
  int64_t count = 0;
  for (int64_t t = 0; t < L; ++t) {
    if (!mask[t]) continue;
    ++count;
    if (targets[t] < 0 || targets[t] >= V) {
      throw DataError("masked_cross_entropy: target id " + std::to_string(targets[t]) +
                      " outside vocab of " + std::to_string(V));
    }
  }
  if (count == 0) throw DataError("masked_cross_entropy: mask selects no positions");
  T total = T(0);
  for (int64_t t = 0; t < L; ++t) {
    if (!mask[t]) continue;
    const T* row = logits.data() + t * V;
    T mx = row[0];
    for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
    total += std::log(sum) + mx - row[targets[t]];
  }
  total /= static_cast<T>(count);
  return Tensor<T>::make_op(
      {1}, {total}, {logits},
      [logits, targets, mask, L, V, count](const detail::Node<T>& o) mutable {
        if (!logits.requires_grad()) return;
        auto& gl = logits.mutable_grad();
        const T g = o.grad[0] / static_cast<T>(count);
        for (int64_t t = 0; t < L; ++t) {
          if (!mask[t]) continue;
          const T* row = logits.data() + t * V;
          T mx = row[0];
          for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
          T sum = T(0);
          for (int64_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
          for (int64_t j = 0; j < V; ++j) {
            const T p = std::exp(row[j] - mx) / sum;
            gl[t * V + j] += g * (p - (j == targets[t] ? T(1) : T(0)));
          }
        }
      });
}

}  // namespace qfs
