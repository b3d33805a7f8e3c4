#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "patchlens/errors.hpp"
#include "patchlens/tensor.hpp"

namespace patchlens {

// Forward kernels with matching hand-written backward kernels. Everything is
// generic over float/double; gradient tests run the double instantiation.

// ---------------------------------------------------------------- matmul

// C[m,n] = A[m,k] * B[k,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data.data() + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C[m,n] = A[m,k] * B[n,k]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> c({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b.row(j);
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
  return c;
}

// C[k,n] = A[m,k]^T * B[m,n]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("matmul_tn: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({k, n});
  for (int64_t p = 0; p < m; ++p) {
    const T* arow = a.row(p);
    const T* brow = b.row(p);
    for (int64_t i = 0; i < k; ++i) {
      const T av = arow[i];
      T* crow = c.row(i);
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// dA = dC * B^T, dB = A^T * dC
template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc, Tensor<T>* da,
                     Tensor<T>* db) {
  if (da) *da = matmul_nt(dc, b);
  if (db) *db = matmul_tn(a, dc);
}

// Accumulating variants used by the model backward pass.
template <typename T>
void matmul_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data.data() + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& b, std::span<T> c) {
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  for (int64_t p = 0; p < m; ++p) {
    const T* arow = a.row(p);
    const T* brow = b.row(p);
    for (int64_t i = 0; i < k; ++i) {
      const T av = arow[i];
      T* crow = c.data() + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------- rmsnorm

// out[t,i] = weight[i] * x[t,i] / sqrt(mean_i(x[t,i]^2) + eps)
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  if (x.rank() != 2 || weight.rank() != 1 || x.dim(1) != weight.dim(0))
    throw ShapeError("rmsnorm: " + shape_str(x.shape) + " with weight " + shape_str(weight.shape));
  const int64_t s = x.dim(0), d = x.dim(1);
  Tensor<T> out({s, d});
  for (int64_t t = 0; t < s; ++t) {
    const T* xr = x.row(t);
    T* yr = out.row(t);
    T ms = T(0);
    for (int64_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
    ms /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(ms + eps);
    for (int64_t i = 0; i < d; ++i) yr[i] = weight.data[i] * xr[i] * inv;
  }
  return out;
}

template <typename T>
void rmsnorm_row(const T* x, const T* weight, T eps, int64_t d, T* out) {
  T ms = T(0);
  for (int64_t i = 0; i < d; ++i) ms += x[i] * x[i];
  ms /= static_cast<T>(d);
  const T inv = T(1) / std::sqrt(ms + eps);
  for (int64_t i = 0; i < d; ++i) out[i] = weight[i] * x[i] * inv;
}

// dx[t,j] = inv*w[j]*dy[t,j] - x[t,j]*inv^3/d * sum_i dy[t,i]*w[i]*x[t,i]
template <typename T>
void rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& weight, T eps, const Tensor<T>& dy,
                      Tensor<T>& dx, Tensor<T>* dweight) {
  const int64_t s = x.dim(0), d = x.dim(1);
  require_shape(dy, x.shape, "rmsnorm_backward dy");
  dx = Tensor<T>({s, d});
  for (int64_t t = 0; t < s; ++t) {
    const T* xr = x.row(t);
    const T* dyr = dy.row(t);
    T* dxr = dx.row(t);
    T ms = T(0);
    for (int64_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
    ms /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(ms + eps);
    T proj = T(0);
    for (int64_t i = 0; i < d; ++i) proj += dyr[i] * weight.data[i] * xr[i];
    const T coef = inv * inv * inv * proj / static_cast<T>(d);
    for (int64_t j = 0; j < d; ++j) dxr[j] = inv * weight.data[j] * dyr[j] - xr[j] * coef;
    if (dweight)
      for (int64_t i = 0; i < d; ++i) dweight->data[i] += dyr[i] * xr[i] * inv;
  }
}

// ---------------------------------------------------------------- softmax

// Row-wise softmax with max subtraction. A row of all -inf has no valid
// probability mass and is rejected.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("softmax_rows: want rank 2, got " + shape_str(x.shape));
  const int64_t n = x.dim(0), m = x.dim(1);
  Tensor<T> out({n, m});
  for (int64_t i = 0; i < n; ++i) {
    const T* xr = x.row(i);
    T* yr = out.row(i);
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < m; ++j) mx = std::max(mx, xr[j]);
    if (!(mx > -std::numeric_limits<T>::infinity()))
      throw ShapeError("empty attention row: all entries are -inf in row " + std::to_string(i));
    T sum = T(0);
    for (int64_t j = 0; j < m; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < m; ++j) yr[j] *= inv;
  }
  return out;
}

// dx = y .* (dy - rowsum(y .* dy))
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  const int64_t n = y.dim(0), m = y.dim(1);
  Tensor<T> dx({n, m});
  for (int64_t i = 0; i < n; ++i) {
    const T* yr = y.row(i);
    const T* dyr = dy.row(i);
    T* dxr = dx.row(i);
    T acc = T(0);
    for (int64_t j = 0; j < m; ++j) acc += yr[j] * dyr[j];
    for (int64_t j = 0; j < m; ++j) dxr[j] = yr[j] * (dyr[j] - acc);
  }
  return dx;
}

// ---------------------------------------------------------------- rope

namespace detail {
template <typename T>
void rope_rotate(const Tensor<T>& x, T base, int64_t position_offset, T sign, Tensor<T>& out) {
  if (x.rank() != 3) throw ShapeError("rope: want [seq,heads,d_head], got " + shape_str(x.shape));
  const int64_t seq = x.dim(0), heads = x.dim(1), dh = x.dim(2);
  if (dh % 2 != 0) throw ConfigError("rope: d_head must be even, got " + std::to_string(dh));
  out = Tensor<T>({seq, heads, dh});
  const int64_t half = dh / 2;
  std::vector<T> freqs(static_cast<size_t>(half));
  for (int64_t i = 0; i < half; ++i)
    freqs[static_cast<size_t>(i)] =
        std::pow(base, -static_cast<T>(2 * i) / static_cast<T>(dh));
  for (int64_t t = 0; t < seq; ++t) {
    const T pos = static_cast<T>(t + position_offset);
    for (int64_t h = 0; h < heads; ++h) {
      const T* xr = x.data.data() + (t * heads + h) * dh;
      T* yr = out.data.data() + (t * heads + h) * dh;
      for (int64_t i = 0; i < half; ++i) {
        const T angle = sign * pos * freqs[static_cast<size_t>(i)];
        const T c = std::cos(angle), s = std::sin(angle);
        const T x0 = xr[2 * i], x1 = xr[2 * i + 1];
        yr[2 * i] = x0 * c - x1 * s;
        yr[2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
}
}  // namespace detail

// Rotates consecutive pairs of q/k channels by pos / base^(2i/d_head).
// position_offset shifts absolute positions for cached decoding.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, T base, int64_t position_offset) {
  Tensor<T> out;
  detail::rope_rotate(x, base, position_offset, T(1), out);
  return out;
}

// The backward of a rotation is the rotation by the opposite angle.
template <typename T>
Tensor<T> rope_backward(const Tensor<T>& dy, T base, int64_t position_offset) {
  Tensor<T> out;
  detail::rope_rotate(dy, base, position_offset, T(-1), out);
  return out;
}

// ---------------------------------------------------------------- silu

template <typename T>
T silu_scalar(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
T silu_grad_scalar(T x) {
  const T sig = T(1) / (T(1) + std::exp(-x));
  return sig * (T(1) + x * (T(1) - sig));
}

// ----------------------------------------------------------- cross entropy

template <typename T>
struct CrossEntropyResult {
  T loss = T(0);
  Tensor<T> dlogits;   // (softmax - onehot) / count at scored positions
  int64_t count = 0;   // scored positions
};

// Mean negative log-likelihood over positions whose target != ignore_index.
template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                                    int ignore_index) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: want [seq,vocab]");
  const int64_t s = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != s)
    throw ShapeError("cross_entropy: targets length " + std::to_string(targets.size()) +
                     " != seq " + std::to_string(s));
  int64_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= v)
      throw ShapeError("cross_entropy: target id " + std::to_string(t) + " out of vocab");
    ++count;
  }
  if (count == 0) throw ShapeError("no target tokens: every position is ignored");

  CrossEntropyResult<T> res;
  res.count = count;
  res.dlogits = Tensor<T>({s, v});
  const T invc = T(1) / static_cast<T>(count);
  for (int64_t i = 0; i < s; ++i) {
    if (targets[static_cast<size_t>(i)] == ignore_index) continue;
    const T* lr = logits.row(i);
    T* gr = res.dlogits.row(i);
    T mx = lr[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
    T sum = T(0);
    for (int64_t j = 0; j < v; ++j) sum += std::exp(lr[j] - mx);
    const T logsum = std::log(sum) + mx;
    const int tgt = targets[static_cast<size_t>(i)];
    res.loss += (logsum - lr[tgt]) * invc;
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < v; ++j) gr[j] = std::exp(lr[j] - mx) * inv * invc;
    gr[tgt] -= invc;
  }
  return res;
}

// Log-softmax of one logit row; used by sequence scoring.
template <typename T>
std::vector<T> log_softmax_row(const T* logits, int64_t v) {
  T mx = logits[0];
  for (int64_t j = 1; j < v; ++j) mx = std::max(mx, logits[j]);
  T sum = T(0);
  for (int64_t j = 0; j < v; ++j) sum += std::exp(logits[j] - mx);
  const T logsum = std::log(sum) + mx;
  std::vector<T> out(static_cast<size_t>(v));
  for (int64_t j = 0; j < v; ++j) out[static_cast<size_t>(j)] = logits[j] - logsum;
  return out;
}

}  // namespace patchlens
