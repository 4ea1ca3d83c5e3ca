// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <vector>

namespace twdpo::numerics {

/// Max-shifted log(sum(exp(x))). Throws invalid_argument on empty input.
double logsumexp(std::span<const double> x);

/// x - logsumexp(x). Throws invalid_argument on empty input.
std::vector<double> log_softmax(std::span<const double> logits);

/// Numerically stable logistic function; saturates instead of overflowing.
double sigmoid(double x) noexcept;

/// log(1 + exp(x)).
double softplus(double x) noexcept;

/// log(sigmoid(x)) == -softplus(-x).
double log_sigmoid(double x) noexcept;

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central-difference gradient (f(theta + h e_i) - f(theta - h e_i)) / 2h.
/// Throws numeric_failure naming the coordinate if f is not finite there.
std::vector<double> finite_diff_grad(const ScalarFunction& f, std::span<const double> theta,
                                     double h);

/// |a - b| / max(1e-8, |a| + |b|).
double relative_error(double a, double b) noexcept;

/// Vector form of relative_error using Euclidean norms:
/// ||a - b|| / max(1e-8, ||a|| + ||b||).
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace twdpo::numerics
