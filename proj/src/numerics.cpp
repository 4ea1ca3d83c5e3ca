// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "twdpo/error.hpp"

namespace twdpo::numerics {

double logsumexp(std::span<const double> x) {
  if (x.empty()) {
    throw Error(ErrorKind::invalid_argument, "logsumexp of an empty vector");
  }
  const double mx = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) {
    s += std::exp(v - mx);
  }
  return mx + std::log(s);
}

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) {
    throw Error(ErrorKind::invalid_argument, "log_softmax of an empty vector");
  }
  const double lse = logsumexp(logits);
  std::vector<double> out(logits.begin(), logits.end());
  for (double& v : out) {
    v -= lse;
  }
  return out;
}

double sigmoid(double x) noexcept {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) noexcept {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double log_sigmoid(double x) noexcept { return -softplus(-x); }

std::vector<double> finite_diff_grad(const ScalarFunction& f, std::span<const double> theta,
                                     double h) {
  if (!(h > 0.0)) {
    throw Error(ErrorKind::invalid_argument, "finite difference step must be positive");
  }
  std::vector<double> point(theta.begin(), theta.end());
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + h;
    const double up = f(point);
    point[i] = saved - h;
    const double down = f(point);
    point[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error(ErrorKind::numeric_failure,
                  "function not finite around coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double a, double b) noexcept {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::invalid_argument, "relative_error needs equal lengths");
  }
  double diff = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(1e-8, std::sqrt(na) + std::sqrt(nb));
}

}  // namespace twdpo::numerics
