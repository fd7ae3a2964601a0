// Copyright (c) 2026 the attackgen authors
// SPDX-License-Identifier: Apache-2.0
#include "attackgen/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace attackgen {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
  ensure_finite("tensor construction");
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  t.ensure_finite("tensor fill");
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::ensure_finite(const char* context) const {
  if (!all_finite()) {
    throw NonFiniteError(std::string("non-finite value in ") + context);
  }
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_size(new_shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(new_shape));
  }
  return Tensor(std::move(new_shape), data_);
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.vec() == b.vec();
}

double lp_norm(const Tensor& t, double p) {
  if (p == 1.0) {
    double s = 0.0;
    for (double v : t.vec()) s += std::fabs(v);
    return s;
  }
  if (p == 2.0) {
    double s = 0.0;
    for (double v : t.vec()) s += v * v;
    return std::sqrt(s);
  }
  if (std::isinf(p)) return linf_norm(t);
  double s = 0.0;
  for (double v : t.vec()) s += std::pow(std::fabs(v), p);
  return std::pow(s, 1.0 / p);
}

double linf_norm(const Tensor& t) {
  double m = 0.0;
  for (double v : t.vec()) m = std::max(m, std::fabs(v));
  return m;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

} // namespace attackgen
