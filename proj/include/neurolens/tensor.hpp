#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "neurolens/error.hpp"

namespace neurolens {

using Vec = std::vector<float>;

/// Dense row-major float32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      fail(ErrorCode::ShapeMismatch, "matrix data length does not match shape");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vec column(std::size_t c) const {
    Vec out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Accumulation is done in double; results are narrowed on store.

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; a zero-norm operand scores 0.
inline double cosine(std::span<const float> a, std::span<const float> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  double c = dot(a, b) / (na * nb);
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return c;
}

/// out = x · W for a row vector x (len W.rows()).
inline Vec vec_mat(std::span<const float> x, const Matrix& w) {
  std::vector<double> acc(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const auto wr = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) acc[c] += xr * wr[c];
  }
  return Vec(acc.begin(), acc.end());
}

/// out = X · W, row by row, accumulating in float (the hot path of the forward pass).
inline Matrix mat_mul(const Matrix& x, const Matrix& w) {
  Matrix out(x.rows(), w.cols());
  const std::size_t n = w.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    float* acc = out.row(i).data();
    const auto xi = x.row(i);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const float xr = xi[r];
      if (xr == 0.0f) continue;
      const float* wr = w.row(r).data();
      for (std::size_t c = 0; c < n; ++c) acc[c] += xr * wr[c];
    }
  }
  return out;
}

inline bool all_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

}  // namespace neurolens
