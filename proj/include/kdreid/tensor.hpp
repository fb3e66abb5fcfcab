#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "kdreid/errors.hpp"

namespace kdreid {

/// Dense row-major matrix of doubles with an optional gradient slot.
///
/// Tensors are plain values: copying one copies its entries and its gradient.
/// A default-constructed tensor is the empty 0x0 placeholder; every tensor
/// built with explicit dimensions has rows, cols >= 1.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(checked_size(rows, cols), fill) {}

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != checked_size(rows, cols)) {
      throw DimensionError("tensor " + shape_string(rows, cols) + " given " +
                           std::to_string(values_.size()) + " values");
    }
  }

  Tensor(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    checked_size(rows_, cols_);
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged tensor literal");
      values_.insert(values_.end(), r.begin(), r.end());
    }
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::string shape() const { return shape_string(rows_, cols_); }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  // Gradient slot.
  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  void zero_grad() { grad_.assign(values_.size(), 0.0); }
  void clear_grad() { grad_.clear(); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Throws NumericError when any entry is NaN or infinite.
  void require_finite(const std::string& where) const {
    if (!all_finite()) throw NumericError("non-finite value in " + where);
  }

  bool operator==(const Tensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && values_ == o.values_;
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

 private:
  static std::size_t checked_size(std::size_t r, std::size_t c) {
    if (r == 0 || c == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(r, c));
    return r * c;
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
  std::vector<double> grad_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// a * b
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.shape() + " vs " + b.shape());
  }
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto br = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward kernels. The tape records these same kernels, so plain inference and
// differentiable evaluation share one arithmetic path.

inline Tensor dense_affine(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw DimensionError("dense_affine: input " + input.shape() + ", weight " + weight.shape() +
                         ", bias " + bias.shape());
  }
  Tensor out = matmul(input, weight);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) r[j] += bias[j];
  }
  return out;
}

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline double row_norm(std::span<const double> r) { return std::sqrt(dot(r, r)); }

inline Tensor l2_normalize_rows(const Tensor& input, double epsilon = 1e-12) {
  if (!(epsilon > 0.0)) throw DimensionError("l2_normalize_rows: epsilon must be positive");
  Tensor out = input;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double denom = std::max(row_norm(r), epsilon);
    for (double& v : r) v /= denom;
  }
  return out;
}

/// Inner products between all pairs of rows.
inline Tensor gram_matrix(const Tensor& feats) {
  const std::size_t n = feats.rows();
  Tensor out(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = j; k < n; ++k) {
      const double v = dot(feats.row(j), feats.row(k));
      out(j, k) = v;
      out(k, j) = v;
    }
  }
  return out;
}

/// Squared Euclidean distances via the expansion |a|^2 + |b|^2 - 2<a,b>,
/// clamped at zero.
inline Tensor pairwise_sq_distances(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("pairwise_sq_distances: feature dimension mismatch " + a.shape() + " vs " +
                         b.shape());
  }
  std::vector<double> na(a.rows()), nb(b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) na[i] = dot(a.row(i), a.row(i));
  for (std::size_t j = 0; j < b.rows(); ++j) nb[j] = dot(b.row(j), b.row(j));
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j)
      out(i, j) = std::max(0.0, na[i] + nb[j] - 2.0 * dot(a.row(i), b.row(j)));
  return out;
}

inline double frobenius_norm_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "frobenius_norm_diff");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline Tensor select_rows(const Tensor& src, std::span<const std::size_t> indices) {
  Tensor out(indices.size(), src.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) std::ranges::copy(src.row(indices[i]), out.row(i).begin());
  return out;
}

inline Tensor vstack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("vstack: no parts");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw DimensionError("vstack: column mismatch");
    rows += p.rows();
  }
  Tensor out(rows, parts.front().cols());
  std::size_t at = 0;
  for (const auto& p : parts)
    for (std::size_t i = 0; i < p.rows(); ++i) std::ranges::copy(p.row(i), out.row(at++).begin());
  return out;
}

}  // namespace kdreid
