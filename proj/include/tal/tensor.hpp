#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tal/error.hpp"

namespace tal {

// Dense n-dimensional array, row-major. The element type is a template
// parameter so tests can run the same operation code in double precision;
// everything outside the test oracles uses the float alias below.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }

  TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw dimension_error("tensor data length does not match shape");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw dimension_error("tensor dimensions must be positive");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // Index helper for the common [B,C,H,W] layout.
  T& at4(int b, int c, int y, int x) {
    return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  const T& at4(int b, int c, int y, int x) const {
    return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

template <typename T>
inline void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* where) {
  if (!a.same_shape(b))
    throw dimension_error(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// sign with sign(0) = 0, applied elementwise.
template <typename T>
inline T sign_of(T v) {
  return static_cast<T>((v > T(0)) - (v < T(0)));
}

template <typename T>
inline double dot(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
inline double norm2(const TensorT<T>& a) {
  double s = 0.0;
  for (T v : a.data) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template <typename T>
inline double norm1(const TensorT<T>& a) {
  double s = 0.0;
  for (T v : a.data) s += std::abs(static_cast<double>(v));
  return s;
}

template <typename T>
inline double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// ||a - b|| / max(||b||, eps); the comparison metric used by the gradient
// and adjoint oracles.
template <typename T>
inline double rel_error(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "rel_error");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    num += d * d;
    den += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max(std::abs(b), 1e-30);
}

}  // namespace tal
