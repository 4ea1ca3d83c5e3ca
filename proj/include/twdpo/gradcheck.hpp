// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "twdpo/objectives.hpp"
#include "twdpo/tiny_lm.hpp"

namespace twdpo::objectives {

/// Pairwise relative errors (Euclidean-norm form) between three gradients of
/// the token-weighted loss over every model parameter.
struct GradCheckResult {
  double reverse_vs_analytic = 0.0;
  double reverse_vs_finite = 0.0;
  double analytic_vs_finite = 0.0;
  std::size_t parameters = 0;

  double worst() const;
};

/// Two layers, d_model 16, two heads, vocab 8.
lm::ModelConfig gradcheck_model_config();

/// Draws a random policy/reference pair, example and weights from `seed` and
/// compares reverse-mode, closed-form and central-difference gradients.
GradCheckResult run_gradient_check(std::uint64_t seed, double h = 1e-5);

}  // namespace twdpo::objectives
