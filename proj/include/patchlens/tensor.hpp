#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "patchlens/errors.hpp"
#include "patchlens/rng.hpp"

namespace patchlens {

enum class Dtype { f32, f64 };

template <typename T>
constexpr Dtype dtype_of() {
  if constexpr (sizeof(T) == 4) return Dtype::f32;
  return Dtype::f64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

// Dense row-major tensor. Binary ops require equal shapes, or a trailing
// shape broadcast over the leading axis (e.g. [seq,d] op [d]).
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(checked_numel(shape), T(0)) {}
  Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != checked_numel(shape))
      throw ShapeError("tensor data size does not match shape");
  }

  static int64_t checked_numel(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int64_t> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor randn(std::vector<int64_t> s, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(s));
    for (T& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  size_t rank() const { return shape.size(); }
  int64_t dim(size_t i) const { return shape.at(i); }

  T& operator()(int64_t i) { return data[static_cast<size_t>(i)]; }
  T operator()(int64_t i) const { return data[static_cast<size_t>(i)]; }
  T& operator()(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  T operator()(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
  T& operator()(int64_t i, int64_t j, int64_t k) {
    return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  T operator()(int64_t i, int64_t j, int64_t k) const {
    return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }

  // Pointer to row i of a 2-D tensor (or to block i of the leading axis).
  T* row(int64_t i) {
    int64_t stride = numel() / shape[0];
    return data.data() + i * stride;
  }
  const T* row(int64_t i) const {
    int64_t stride = numel() / shape[0];
    return data.data() + i * stride;
  }
  int64_t row_stride() const { return shape.empty() ? 0 : numel() / shape[0]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // Concatenate another 2-D tensor's rows below this one (equal width).
  void append_rows(const Tensor& o) {
    if (rank() != 2 || o.rank() != 2 || shape[1] != o.shape[1])
      throw ShapeError("append_rows: " + shape_str(shape) + " + " + shape_str(o.shape));
    data.insert(data.end(), o.data.begin(), o.data.end());
    shape[0] += o.shape[0];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>::zeros(t.shape);
}

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int64_t>& s, const char* what) {
  if (t.shape != s)
    throw ShapeError(std::string(what) + ": expected " + shape_str(s) + ", got " + shape_str(t.shape));
}

// a += b, with b either equal-shaped or broadcast over a's leading axis.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b, T scale = T(1)) {
  if (a.shape == b.shape) {
    for (int64_t i = 0; i < a.numel(); ++i) a.data[i] += scale * b.data[i];
    return;
  }
  if (a.rank() >= 1 && b.rank() + 1 == a.rank() &&
      std::equal(b.shape.begin(), b.shape.end(), a.shape.begin() + 1)) {
    int64_t stride = a.row_stride();
    for (int64_t i = 0; i < a.dim(0); ++i) {
      T* ar = a.row(i);
      for (int64_t j = 0; j < stride; ++j) ar[j] += scale * b.data[j];
    }
    return;
  }
  throw ShapeError("add: shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                   " do not conform");
}

template <typename T>
void scale_inplace(Tensor<T>& a, T s) {
  for (T& v : a.data) v *= s;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc = T(0);
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  T m = T(0);
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace patchlens
