// Copyright (c) 2026 the attackgen authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "attackgen/errors.hpp"

namespace attackgen {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense N-dimensional array of doubles, row-major. Rank 0 is a scalar.
/// Every element is finite; constructors and mutating helpers enforce it.
class Tensor {
public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Strided accessors for the common ranks.
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Throws NonFiniteError if any element is NaN or Inf.
  void ensure_finite(const char* context) const;
  bool all_finite() const;

  Tensor reshaped(Shape new_shape) const;

private:
  Shape shape_;
  std::vector<double> data_;
};

/// Exact elementwise equality (used by determinism and round-trip tests).
bool bits_equal(const Tensor& a, const Tensor& b);

double lp_norm(const Tensor& t, double p);
double linf_norm(const Tensor& t);
double dot(const Tensor& a, const Tensor& b);

/// sign with sign(0) = 0.
inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

} // namespace attackgen
