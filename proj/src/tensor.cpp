// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/tensor.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "twdpo/error.hpp"

namespace twdpo::numerics {

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return shape.empty() ? 0 : n;
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw Error(ErrorKind::invalid_argument, "tensor extents must be positive");
    }
  }
  data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw Error(ErrorKind::invalid_argument, "tensor extents must be positive");
    }
  }
  if (shape_size(shape_) != data_.size()) {
    throw Error(ErrorKind::invalid_argument,
                "tensor data length " + std::to_string(data_.size()) +
                    " does not match shape size " + std::to_string(shape_size(shape_)));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape()); }

std::size_t Tensor::rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

bool Tensor::all_finite() const noexcept {
  // x - x is 0 for finite x and NaN otherwise; the sum stays branch-free.
  double acc = 0.0;
  for (double v : data_) {
    acc += v - v;
  }
  return acc == 0.0;
}

}  // namespace twdpo::numerics
