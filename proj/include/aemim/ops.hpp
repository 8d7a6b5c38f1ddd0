#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "aemim/tensor.hpp"

namespace aemim {

namespace detail {

// True when an op invoked under `tape` must record a node.
template <typename T>
inline bool tracked(TapeT<T>* tape, const TensorT<T>& t) {
  if (!tape || !t.requires_grad) return false;
  return t.leaf || tape->owns(t.ref.get());
}

template <typename T, typename... Ts>
inline bool recording(TapeT<T>* tape, const Ts&... ts) {
  return (tracked(tape, ts) || ...);
}

// b must equal a trailing suffix of a's shape (broadcast over leading dims).
template <typename T>
inline void check_suffix(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (b.ndim() > a.ndim())
    throw DimensionError(std::string(op) + ": " + shape_str(b.shape) +
                         " has more dims than " + shape_str(a.shape));
  int off = a.ndim() - b.ndim();
  for (int i = 0; i < b.ndim(); ++i)
    if (a.shape[static_cast<size_t>(off + i)] != b.shape[static_cast<size_t>(i)])
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape) + " and " +
                           shape_str(b.shape) + " are not broadcast-compatible");
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
inline void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      T av = arow[kk];
      const T* brow = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T  (dot products of contiguous rows)
template <typename T>
inline void gemm_abt(const T* a, const T* b, T* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * n;
    T* crow = c + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T* brow = b + static_cast<size_t>(kk) * n;
      T acc = T(0);
      for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[kk] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
inline void gemm_atb(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int mm = 0; mm < m; ++mm) {
    const T* arow = a + static_cast<size_t>(mm) * k;
    const T* brow = b + static_cast<size_t>(mm) * n;
    for (int kk = 0; kk < k; ++kk) {
      T av = arow[kk];
      T* crow = c + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<size_t> row_major_strides(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] =
        st[static_cast<size_t>(i + 1)] * static_cast<size_t>(s[static_cast<size_t>(i + 1)]);
  return st;
}

inline int normalize_axis(int axis, int ndim, const char* op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw DimensionError(std::string(op) + ": axis out of range for rank " +
                         std::to_string(ndim));
  return axis;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_suffix(a, b, "add");
  auto out = TensorT<T>::zeros(a.shape);
  const size_t n = a.numel(), bn = b.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i % bn];

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a, b)) {
    int ia = tape->tracked_id(a), ib = tape->tracked_id(b);
    int id = tape->add_node("add", n, [ia, ib, n, bn](const std::vector<T>& g, TapeT<T>& t) {
      if (ia >= 0) {
        auto& ga = t.grad_buf(ia);
        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (ib >= 0) {
        auto& gb = t.grad_buf(ib);
        for (size_t i = 0; i < n; ++i) gb[i % bn] += g[i];
      }
    });
    tape->attach(out, id);
  }
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_suffix(a, b, "sub");
  auto out = TensorT<T>::zeros(a.shape);
  const size_t n = a.numel(), bn = b.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i % bn];

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a, b)) {
    int ia = tape->tracked_id(a), ib = tape->tracked_id(b);
    int id = tape->add_node("sub", n, [ia, ib, n, bn](const std::vector<T>& g, TapeT<T>& t) {
      if (ia >= 0) {
        auto& ga = t.grad_buf(ia);
        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (ib >= 0) {
        auto& gb = t.grad_buf(ib);
        for (size_t i = 0; i < n; ++i) gb[i % bn] -= g[i];
      }
    });
    tape->attach(out, id);
  }
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_suffix(a, b, "mul");
  auto out = TensorT<T>::zeros(a.shape);
  const size_t n = a.numel(), bn = b.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i % bn];

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a, b)) {
    int ia = tape->tracked_id(a), ib = tape->tracked_id(b);
    auto av = a.data, bv = b.data;
    int id =
        tape->add_node("mul", n, [ia, ib, n, bn, av, bv](const std::vector<T>& g, TapeT<T>& t) {
          if (ia >= 0) {
            auto& ga = t.grad_buf(ia);
            for (size_t i = 0; i < n; ++i) ga[i] += g[i] * (*bv)[i % bn];
          }
          if (ib >= 0) {
            auto& gb = t.grad_buf(ib);
            for (size_t i = 0; i < n; ++i) gb[i % bn] += g[i] * (*av)[i];
          }
        });
    tape->attach(out, id);
  }
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  auto out = TensorT<T>::zeros(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    int id = tape->add_node("scale", n, [ia, n, s](const std::vector<T>& g, TapeT<T>& t) {
      if (ia >= 0) {
        auto& ga = t.grad_buf(ia);
        for (size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
      }
    });
    tape->attach(out, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix product, batched over equal leading dims (or plain 2-D rhs)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape) +
                         " and " + shape_str(b.shape));
  const int m = a.shape[static_cast<size_t>(a.ndim() - 2)];
  const int k = a.shape[static_cast<size_t>(a.ndim() - 1)];
  const int kb = b.shape[static_cast<size_t>(b.ndim() - 2)];
  const int n = b.shape[static_cast<size_t>(b.ndim() - 1)];
  if (k != kb)
    throw DimensionError("matmul: inner dimensions disagree between " + shape_str(a.shape) +
                         " and " + shape_str(b.shape));

  Shape a_batch(a.shape.begin(), a.shape.end() - 2);
  Shape b_batch(b.shape.begin(), b.shape.end() - 2);
  const bool shared_rhs = b_batch.empty();
  if (!shared_rhs && a_batch != b_batch)
    throw DimensionError("matmul: batch dims disagree between " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));

  const size_t batch = shape_numel(a_batch);
  Shape out_shape = a_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto out = TensorT<T>::zeros(out_shape);

  const size_t a_step = static_cast<size_t>(m) * k;
  const size_t b_step = shared_rhs ? 0 : static_cast<size_t>(k) * n;
  const size_t o_step = static_cast<size_t>(m) * n;
  for (size_t i = 0; i < batch; ++i)
    detail::gemm_nn(a.ptr() + i * a_step, b.ptr() + i * b_step, out.ptr() + i * o_step, m, k, n);

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a, b)) {
    int ia = tape->tracked_id(a), ib = tape->tracked_id(b);
    auto av = a.data, bv = b.data;
    int id = tape->add_node(
        "matmul", out.numel(),
        [ia, ib, av, bv, m, k, n, batch, a_step, b_step, o_step](const std::vector<T>& g,
                                                                 TapeT<T>& t) {
          if (ia >= 0) {
            auto& ga = t.grad_buf(ia);
            for (size_t i = 0; i < batch; ++i)
              detail::gemm_abt(g.data() + i * o_step, bv->data() + i * b_step,
                               ga.data() + i * a_step, m, n, k);
          }
          if (ib >= 0) {
            auto& gb = t.grad_buf(ib);
            for (size_t i = 0; i < batch; ++i)
              detail::gemm_atb(av->data() + i * a_step, g.data() + i * o_step,
                               gb.data() + i * b_step, m, k, n);
          }
        });
    tape->attach(out, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape) + " as " +
                         shape_str(new_shape));
  TensorT<T> out;
  out.shape = std::move(new_shape);
  out.data = a.data;  // row-major layout is unchanged

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    const size_t n = a.numel();
    int id = tape->add_node("reshape", n, [ia, n](const std::vector<T>& g, TapeT<T>& t) {
      if (ia >= 0) {
        auto& ga = t.grad_buf(ia);
        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
    });
    tape->attach(out, id);
  }
  return out;
}

template <typename T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<int>& axes) {
  const int nd = a.ndim();
  if (static_cast<int>(axes.size()) != nd)
    throw DimensionError("permute: axes list must cover every dimension of " +
                         shape_str(a.shape));
  std::vector<bool> seen(static_cast<size_t>(nd), false);
  Shape out_shape(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    int ax = detail::normalize_axis(axes[static_cast<size_t>(d)], nd, "permute");
    if (seen[static_cast<size_t>(ax)]) throw DimensionError("permute: repeated axis");
    seen[static_cast<size_t>(ax)] = true;
    out_shape[static_cast<size_t>(d)] = a.shape[static_cast<size_t>(ax)];
  }

  auto out = TensorT<T>::zeros(out_shape);
  const auto in_strides = detail::row_major_strides(a.shape);
  // stride in the input for each output dimension
  std::vector<size_t> step(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d)
    step[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(d)])];

  const size_t n = a.numel();
  std::vector<int> coord(static_cast<size_t>(nd), 0);
  size_t in_flat = 0;
  for (size_t o = 0; o < n; ++o) {
    (*out.data)[o] = (*a.data)[in_flat];
    for (int d = nd - 1; d >= 0; --d) {
      auto du = static_cast<size_t>(d);
      if (++coord[du] < out_shape[du]) {
        in_flat += step[du];
        break;
      }
      in_flat -= step[du] * (static_cast<size_t>(out_shape[du]) - 1);
      coord[du] = 0;
    }
  }

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    int id = tape->add_node(
        "permute", n, [ia, n, nd, step, out_shape](const std::vector<T>& g, TapeT<T>& t) {
          if (ia < 0) return;
          auto& ga = t.grad_buf(ia);
          std::vector<int> c(static_cast<size_t>(nd), 0);
          size_t in_flat2 = 0;
          for (size_t o = 0; o < n; ++o) {
            ga[in_flat2] += g[o];
            for (int d = nd - 1; d >= 0; --d) {
              auto du = static_cast<size_t>(d);
              if (++c[du] < out_shape[du]) {
                in_flat2 += step[du];
                break;
              }
              in_flat2 -= step[du] * (static_cast<size_t>(out_shape[du]) - 1);
              c[du] = 0;
            }
          }
        });
    tape->attach(out, id);
  }
  return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a, int d0, int d1) {
  std::vector<int> axes(static_cast<size_t>(a.ndim()));
  for (int i = 0; i < a.ndim(); ++i) axes[static_cast<size_t>(i)] = i;
  d0 = detail::normalize_axis(d0, a.ndim(), "transpose");
  d1 = detail::normalize_axis(d1, a.ndim(), "transpose");
  std::swap(axes[static_cast<size_t>(d0)], axes[static_cast<size_t>(d1)]);
  return permute(a, axes);
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ContractViolation("concat_rows: nothing to concatenate");
  Shape trail(parts[0].shape.begin() + 1, parts[0].shape.end());
  int rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() < 1) throw DimensionError("concat_rows: operand has rank 0");
    Shape pt(p.shape.begin() + 1, p.shape.end());
    if (pt != trail)
      throw DimensionError("concat_rows: trailing dims disagree: " + shape_str(parts[0].shape) +
                           " vs " + shape_str(p.shape));
    rows += p.shape[0];
  }
  Shape out_shape = {rows};
  out_shape.insert(out_shape.end(), trail.begin(), trail.end());
  auto out = TensorT<T>::zeros(out_shape);
  const size_t row_elems = shape_numel(trail);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data->begin(), p.data->end(), out.data->begin() + static_cast<long>(off));
    off += p.numel();
  }

  auto* tape = TapeT<T>::current();
  bool rec = false;
  for (const auto& p : parts) rec = rec || detail::tracked(tape, p);
  if (rec) {
    std::vector<int> ids;
    std::vector<size_t> sizes;
    for (const auto& p : parts) {
      ids.push_back(tape->tracked_id(p));
      sizes.push_back(p.numel());
    }
    int id = tape->add_node("concat_rows", out.numel(),
                            [ids, sizes, row_elems](const std::vector<T>& g, TapeT<T>& t) {
                              (void)row_elems;
                              size_t pos = 0;
                              for (size_t p = 0; p < ids.size(); ++p) {
                                if (ids[p] >= 0) {
                                  auto& gp = t.grad_buf(ids[p]);
                                  for (size_t i = 0; i < sizes[p]; ++i) gp[i] += g[pos + i];
                                }
                                pos += sizes[p];
                              }
                            });
    tape->attach(out, id);
  }
  return out;
}

// Select rows of dim 0 by index; indices may repeat (broadcast by repetition).
template <typename T>
TensorT<T> gather_rows(const TensorT<T>& a, const std::vector<int>& idx) {
  if (a.ndim() < 1) throw DimensionError("gather_rows: operand has rank 0");
  const int rows = a.shape[0];
  const size_t row_elems = a.numel() / static_cast<size_t>(std::max(rows, 1));
  for (int r : idx)
    if (r < 0 || r >= rows)
      throw ContractViolation("gather_rows: index " + std::to_string(r) + " out of range [0," +
                              std::to_string(rows) + ")");
  Shape out_shape = a.shape;
  out_shape[0] = static_cast<int>(idx.size());
  auto out = TensorT<T>::zeros(out_shape);
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(a.data->begin() + static_cast<long>(static_cast<size_t>(idx[r]) * row_elems),
              a.data->begin() + static_cast<long>((static_cast<size_t>(idx[r]) + 1) * row_elems),
              out.data->begin() + static_cast<long>(r * row_elems));

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    int id = tape->add_node("gather_rows", out.numel(),
                            [ia, idx, row_elems](const std::vector<T>& g, TapeT<T>& t) {
                              if (ia < 0) return;
                              auto& ga = t.grad_buf(ia);
                              for (size_t r = 0; r < idx.size(); ++r)
                                for (size_t j = 0; j < row_elems; ++j)
                                  ga[static_cast<size_t>(idx[r]) * row_elems + j] +=
                                      g[r * row_elems + j];
                            });
    tape->attach(out, id);
  }
  return out;
}

// Place rows of a into a zero tensor with n_rows rows; indices must be unique.
template <typename T>
TensorT<T> scatter_rows(const TensorT<T>& a, const std::vector<int>& idx, int n_rows) {
  if (a.ndim() < 1) throw DimensionError("scatter_rows: operand has rank 0");
  if (static_cast<int>(idx.size()) != a.shape[0])
    throw ContractViolation("scatter_rows: index count " + std::to_string(idx.size()) +
                            " != row count " + std::to_string(a.shape[0]));
  std::vector<bool> used(static_cast<size_t>(n_rows), false);
  for (int r : idx) {
    if (r < 0 || r >= n_rows)
      throw ContractViolation("scatter_rows: index " + std::to_string(r) + " out of range [0," +
                              std::to_string(n_rows) + ")");
    if (used[static_cast<size_t>(r)])
      throw ContractViolation("scatter_rows: duplicate index " + std::to_string(r));
    used[static_cast<size_t>(r)] = true;
  }
  const size_t row_elems = a.numel() / static_cast<size_t>(std::max(a.shape[0], 1));
  Shape out_shape = a.shape;
  out_shape[0] = n_rows;
  auto out = TensorT<T>::zeros(out_shape);
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(a.data->begin() + static_cast<long>(r * row_elems),
              a.data->begin() + static_cast<long>((r + 1) * row_elems),
              out.data->begin() + static_cast<long>(static_cast<size_t>(idx[r]) * row_elems));

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    int id = tape->add_node("scatter_rows", out.numel(),
                            [ia, idx, row_elems](const std::vector<T>& g, TapeT<T>& t) {
                              if (ia < 0) return;
                              auto& ga = t.grad_buf(ia);
                              for (size_t r = 0; r < idx.size(); ++r)
                                for (size_t j = 0; j < row_elems; ++j)
                                  ga[r * row_elems + j] +=
                                      g[static_cast<size_t>(idx[r]) * row_elems + j];
                            });
    tape->attach(out, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// tanh-approximation GELU
template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T k = static_cast<T>(0.044715);
  auto out = TensorT<T>::zeros(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) {
    T x = (*a.data)[i];
    T t = std::tanh(c * (x + k * x * x * x));
    (*out.data)[i] = T(0.5) * x * (T(1) + t);
  }

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    auto av = a.data;
    int id = tape->add_node("gelu", n, [ia, n, av, c, k](const std::vector<T>& g, TapeT<T>& t) {
      if (ia < 0) return;
      auto& ga = t.grad_buf(ia);
      for (size_t i = 0; i < n; ++i) {
        T x = (*av)[i];
        T u = c * (x + k * x * x * x);
        T th = std::tanh(u);
        T du = c * (T(1) + T(3) * k * x * x);
        ga[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du);
      }
    });
    tape->attach(out, id);
  }
  return out;
}

// Per-vector standardization over the last dim followed by affine gamma/beta.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps) {
  if (x.ndim() < 1) throw DimensionError("layer_norm: input has rank 0");
  const int d = x.shape[static_cast<size_t>(x.ndim() - 1)];
  if (gamma.numel() != static_cast<size_t>(d) || beta.numel() != static_cast<size_t>(d))
    throw DimensionError("layer_norm: gamma/beta length must match last dim " +
                         std::to_string(d) + ", got " + shape_str(gamma.shape) + " and " +
                         shape_str(beta.shape));
  if (!(eps > T(0))) throw ContractViolation("layer_norm: eps must be positive");

  const size_t rows = x.numel() / static_cast<size_t>(d);
  auto out = TensorT<T>::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_sd = std::make_shared<std::vector<T>>(rows);
  for (size_t r = 0; r < rows; ++r) {
    const T* xp = x.ptr() + r * static_cast<size_t>(d);
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += xp[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      T dx = xp[j] - mu;
      var += dx * dx;
    }
    var /= static_cast<T>(d);
    T inv = T(1) / std::sqrt(var + eps);
    (*inv_sd)[r] = inv;
    for (int j = 0; j < d; ++j) {
      T xh = (xp[j] - mu) * inv;
      (*xhat)[r * static_cast<size_t>(d) + static_cast<size_t>(j)] = xh;
      (*out.data)[r * static_cast<size_t>(d) + static_cast<size_t>(j)] =
          (*gamma.data)[static_cast<size_t>(j)] * xh + (*beta.data)[static_cast<size_t>(j)];
    }
  }

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, x, gamma, beta)) {
    int ix = tape->tracked_id(x), ig = tape->tracked_id(gamma), ib = tape->tracked_id(beta);
    auto gv = gamma.data;
    int id = tape->add_node(
        "layer_norm", x.numel(),
        [ix, ig, ib, gv, xhat, inv_sd, rows, d](const std::vector<T>& g, TapeT<T>& t) {
          for (size_t r = 0; r < rows; ++r) {
            const size_t base = r * static_cast<size_t>(d);
            if (ig >= 0) {
              auto& gg = t.grad_buf(ig);
              for (int j = 0; j < d; ++j)
                gg[static_cast<size_t>(j)] +=
                    g[base + static_cast<size_t>(j)] * (*xhat)[base + static_cast<size_t>(j)];
            }
            if (ib >= 0) {
              auto& gb = t.grad_buf(ib);
              for (int j = 0; j < d; ++j)
                gb[static_cast<size_t>(j)] += g[base + static_cast<size_t>(j)];
            }
            if (ix >= 0) {
              auto& gx = t.grad_buf(ix);
              T mean_dy = T(0), mean_dy_xhat = T(0);
              for (int j = 0; j < d; ++j) {
                T dy = g[base + static_cast<size_t>(j)] * (*gv)[static_cast<size_t>(j)];
                mean_dy += dy;
                mean_dy_xhat += dy * (*xhat)[base + static_cast<size_t>(j)];
              }
              mean_dy /= static_cast<T>(d);
              mean_dy_xhat /= static_cast<T>(d);
              for (int j = 0; j < d; ++j) {
                T dy = g[base + static_cast<size_t>(j)] * (*gv)[static_cast<size_t>(j)];
                gx[base + static_cast<size_t>(j)] +=
                    (*inv_sd)[r] *
                    (dy - mean_dy - (*xhat)[base + static_cast<size_t>(j)] * mean_dy_xhat);
              }
            }
          }
        });
    tape->attach(out, id);
  }
  return out;
}

namespace detail {

// Applies fn(outer, inner) over all positions with the given axis factored
// out; elements along the axis live at base + k*inner_stride.
template <typename Fn>
inline void for_each_lane(const Shape& shape, int axis, Fn&& fn) {
  size_t outer = 1, inner = 1;
  const auto usize = shape.size();
  for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= static_cast<size_t>(shape[i]);
  for (size_t i = static_cast<size_t>(axis) + 1; i < usize; ++i)
    inner *= static_cast<size_t>(shape[i]);
  const size_t len = static_cast<size_t>(shape[static_cast<size_t>(axis)]);
  for (size_t o = 0; o < outer; ++o)
    for (size_t in = 0; in < inner; ++in) fn(o * len * inner + in, inner);
}

}  // namespace detail

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  axis = detail::normalize_axis(axis, x.ndim(), "softmax");
  auto out = TensorT<T>::zeros(x.shape);
  const size_t len = static_cast<size_t>(x.shape[static_cast<size_t>(axis)]);
  detail::for_each_lane(x.shape, axis, [&](size_t base, size_t stride) {
    T mx = (*x.data)[base];
    for (size_t k = 1; k < len; ++k) mx = std::max(mx, (*x.data)[base + k * stride]);
    T sum = T(0);
    for (size_t k = 0; k < len; ++k) {
      T e = std::exp((*x.data)[base + k * stride] - mx);
      (*out.data)[base + k * stride] = e;
      sum += e;
    }
    for (size_t k = 0; k < len; ++k) (*out.data)[base + k * stride] /= sum;
  });

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, x)) {
    int ix = tape->tracked_id(x);
    auto yv = out.data;
    auto shape = x.shape;
    int id = tape->add_node(
        "softmax", x.numel(), [ix, yv, shape, axis, len](const std::vector<T>& g, TapeT<T>& t) {
          if (ix < 0) return;
          auto& gx = t.grad_buf(ix);
          detail::for_each_lane(shape, axis, [&](size_t base, size_t stride) {
            T dot = T(0);
            for (size_t k = 0; k < len; ++k)
              dot += g[base + k * stride] * (*yv)[base + k * stride];
            for (size_t k = 0; k < len; ++k)
              gx[base + k * stride] +=
                  (*yv)[base + k * stride] * (g[base + k * stride] - dot);
          });
        });
    tape->attach(out, id);
  }
  return out;
}

template <typename T>
TensorT<T> log_softmax(const TensorT<T>& x, int axis) {
  axis = detail::normalize_axis(axis, x.ndim(), "log_softmax");
  auto out = TensorT<T>::zeros(x.shape);
  const size_t len = static_cast<size_t>(x.shape[static_cast<size_t>(axis)]);
  detail::for_each_lane(x.shape, axis, [&](size_t base, size_t stride) {
    T mx = (*x.data)[base];
    for (size_t k = 1; k < len; ++k) mx = std::max(mx, (*x.data)[base + k * stride]);
    T sum = T(0);
    for (size_t k = 0; k < len; ++k) sum += std::exp((*x.data)[base + k * stride] - mx);
    T lse = mx + std::log(sum);
    for (size_t k = 0; k < len; ++k)
      (*out.data)[base + k * stride] = (*x.data)[base + k * stride] - lse;
  });

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, x)) {
    int ix = tape->tracked_id(x);
    auto yv = out.data;
    auto shape = x.shape;
    int id = tape->add_node(
        "log_softmax", x.numel(),
        [ix, yv, shape, axis, len](const std::vector<T>& g, TapeT<T>& t) {
          if (ix < 0) return;
          auto& gx = t.grad_buf(ix);
          detail::for_each_lane(shape, axis, [&](size_t base, size_t stride) {
            T gsum = T(0);
            for (size_t k = 0; k < len; ++k) gsum += g[base + k * stride];
            for (size_t k = 0; k < len; ++k)
              gx[base + k * stride] +=
                  g[base + k * stride] - std::exp((*yv)[base + k * stride]) * gsum;
          });
        });
    tape->attach(out, id);
  }
  return out;
}

template <typename T>
TensorT<T> logt(const TensorT<T>& a) {
  auto out = TensorT<T>::zeros(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::log((*a.data)[i]);

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    auto av = a.data;
    int id = tape->add_node("log", n, [ia, n, av](const std::vector<T>& g, TapeT<T>& t) {
      if (ia < 0) return;
      auto& ga = t.grad_buf(ia);
      for (size_t i = 0; i < n; ++i) ga[i] += g[i] / (*av)[i];
    });
    tape->attach(out, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
  T s = T(0);
  for (T v : *a.data) s += v;
  auto out = TensorT<T>::scalar(s);

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    const size_t n = a.numel();
    int id = tape->add_node("sum_all", 1, [ia, n](const std::vector<T>& g, TapeT<T>& t) {
      if (ia < 0) return;
      auto& ga = t.grad_buf(ia);
      for (size_t i = 0; i < n; ++i) ga[i] += g[0];
    });
    tape->attach(out, id);
  }
  return out;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
  if (a.numel() == 0) throw ContractViolation("mean_all: empty tensor");
  T s = T(0);
  for (T v : *a.data) s += v;
  const T n = static_cast<T>(a.numel());
  auto out = TensorT<T>::scalar(s / n);

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    const size_t cnt = a.numel();
    int id = tape->add_node("mean_all", 1, [ia, cnt, n](const std::vector<T>& g, TapeT<T>& t) {
      if (ia < 0) return;
      auto& ga = t.grad_buf(ia);
      for (size_t i = 0; i < cnt; ++i) ga[i] += g[0] / n;
    });
    tape->attach(out, id);
  }
  return out;
}

// Mean over dim 0: [R, ...] -> [...]
template <typename T>
TensorT<T> mean_rows(const TensorT<T>& a) {
  if (a.ndim() < 1 || a.shape[0] == 0) throw ContractViolation("mean_rows: no rows");
  const int rows = a.shape[0];
  const size_t row_elems = a.numel() / static_cast<size_t>(rows);
  Shape out_shape(a.shape.begin() + 1, a.shape.end());
  auto out = TensorT<T>::zeros(out_shape);
  for (int r = 0; r < rows; ++r)
    for (size_t j = 0; j < row_elems; ++j)
      (*out.data)[j] += (*a.data)[static_cast<size_t>(r) * row_elems + j];
  for (size_t j = 0; j < row_elems; ++j) (*out.data)[j] /= static_cast<T>(rows);

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a)) {
    int ia = tape->tracked_id(a);
    int id = tape->add_node("mean_rows", row_elems,
                            [ia, rows, row_elems](const std::vector<T>& g, TapeT<T>& t) {
                              if (ia < 0) return;
                              auto& ga = t.grad_buf(ia);
                              for (int r = 0; r < rows; ++r)
                                for (size_t j = 0; j < row_elems; ++j)
                                  ga[static_cast<size_t>(r) * row_elems + j] +=
                                      g[j] / static_cast<T>(rows);
                            });
    tape->attach(out, id);
  }
  return out;
}

// Mean over all elements of the squared difference.
template <typename T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape != b.shape)
    throw DimensionError("mse: shapes disagree: " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  if (a.numel() == 0) throw ContractViolation("mse: empty tensors");
  const size_t n = a.numel();
  T s = T(0);
  for (size_t i = 0; i < n; ++i) {
    T d = (*a.data)[i] - (*b.data)[i];
    s += d * d;
  }
  auto out = TensorT<T>::scalar(s / static_cast<T>(n));

  auto* tape = TapeT<T>::current();
  if (detail::recording(tape, a, b)) {
    int ia = tape->tracked_id(a), ib = tape->tracked_id(b);
    auto av = a.data, bv = b.data;
    int id = tape->add_node("mse", 1, [ia, ib, av, bv, n](const std::vector<T>& g, TapeT<T>& t) {
      const T c = T(2) / static_cast<T>(n);
      if (ia >= 0) {
        auto& ga = t.grad_buf(ia);
        for (size_t i = 0; i < n; ++i) ga[i] += g[0] * c * ((*av)[i] - (*bv)[i]);
      }
      if (ib >= 0) {
        auto& gb = t.grad_buf(ib);
        for (size_t i = 0; i < n; ++i) gb[i] -= g[0] * c * ((*av)[i] - (*bv)[i]);
      }
    });
    tape->attach(out, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph control
// ---------------------------------------------------------------------------

// Same values, excluded from the tape; consumers see a constant.
template <typename T>
TensorT<T> detach(const TensorT<T>& a) {
  TensorT<T> out;
  out.shape = a.shape;
  out.data = a.data;
  return out;
}

template <typename T>
TensorT<T> sign(const TensorT<T>& a) {
  auto out = TensorT<T>::zeros(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) {
    T v = (*a.data)[i];
    (*out.data)[i] = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
  }
  return out;
}

}  // namespace aemim
