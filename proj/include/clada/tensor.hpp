#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "clada/error.hpp"

namespace clada {

/// Dense row-major float matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  float& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  float operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

// The reductions below use `omp simd` so the compiler may vectorize them
// without -ffast-math. The association order is fixed per build, so results
// stay bit-reproducible run to run.

inline float dot(std::span<const float> a, std::span<const float> b) {
  float s = 0.0f;
  const float* pa = a.data();
  const float* pb = b.data();
  const std::size_t n = a.size();
#pragma omp simd reduction(+ : s)
  for (std::size_t i = 0; i < n; ++i) s += pa[i] * pb[i];
  return s;
}

/// y += alpha * x
inline void axpy(float alpha, std::span<const float> x, std::span<float> y) {
  const float* px = x.data();
  float* py = y.data();
  const std::size_t n = x.size();
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) py[i] += alpha * px[i];
}

inline double norm2(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// y = W x for W [rows x cols].
inline void matvec(const Matrix& w, std::span<const float> x, std::span<float> y) {
  for (std::size_t r = 0; r < w.rows; ++r) y[r] = dot(w.row(r), x);
}

inline bool all_finite(std::span<const float> v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace clada
