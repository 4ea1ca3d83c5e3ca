// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "twdpo/trace.hpp"
#include "twdpo/weights.hpp"

namespace twdpo::objectives {

using weights::TokenWeightVector;

enum class LossVariant { dpo, twdpo, twdpo_lennorm };

std::string to_string(LossVariant v);
LossVariant parse_variant(const std::string& text);

struct LossConfig {
  double beta = 5e-3;
  LossVariant variant = LossVariant::twdpo;

  void validate() const;
  /// 2.0 for the length-normalized variant, 5e-3 otherwise.
  static double default_beta(LossVariant v);
};

/// Per-token log-probabilities of both responses under policy and reference.
struct PairLogProbs {
  std::vector<double> chosen_theta;
  std::vector<double> chosen_ref;
  std::vector<double> rejected_theta;
  std::vector<double> rejected_ref;

  /// Throws invalid_argument on empty or unequal-length vectors.
  void validate() const;
};

double preference_prob(double r_w, double r_l);

double dpo_loss(const PairLogProbs& p, double beta);

/// Throws weight_length_mismatch naming `example_id` when a weight vector
/// does not cover its response.
double twdpo_loss(const PairLogProbs& p, const TokenWeightVector& a_w,
                  const TokenWeightVector& a_l, double beta, const std::string& example_id = "");

double twdpo_loss_lennorm(const PairLogProbs& p, const TokenWeightVector& a_w,
                          const TokenWeightVector& a_l, double beta,
                          const std::string& example_id = "");

/// Dispatches on `cfg.variant`; weights are ignored for plain DPO.
double loss(const PairLogProbs& p, const TokenWeightVector& a_w, const TokenWeightVector& a_l,
            const LossConfig& cfg, const std::string& example_id = "");

/// beta * |y| * sum_t a_t (theta_t - ref_t). The partition term is omitted.
double implicit_reward(std::span<const double> theta, std::span<const double> ref,
                       const TokenWeightVector& a, double beta);

/// Per-token multipliers c_t such that the loss is
/// -log sigmoid(sum c_w * ratio_w - sum c_l * ratio_l).
struct Coefficients {
  std::vector<double> chosen;
  std::vector<double> rejected;
};

Coefficients coefficients(std::size_t len_w, std::size_t len_l, const TokenWeightVector& a_w,
                          const TokenWeightVector& a_l, const LossConfig& cfg,
                          const std::string& example_id = "");

/// Scalar loss node over the policy's per-token log-prob nodes; reference
/// values enter as constants.
numerics::NodeId traced_loss(numerics::Trace& trace, numerics::NodeId chosen_theta,
                             numerics::NodeId rejected_theta, std::span<const double> chosen_ref,
                             std::span<const double> rejected_ref, const Coefficients& c);

/// Closed-form gradient of the weighted loss with respect to every leaf of
/// `trace`: -beta * sigmoid(r'_l - r'_w) times the difference of weighted
/// per-token log-prob gradients. One reverse pass per response token.
std::vector<numerics::Tensor> analytic_twdpo_grad(numerics::Trace& trace,
                                                  numerics::NodeId chosen_theta,
                                                  numerics::NodeId rejected_theta,
                                                  const PairLogProbs& p,
                                                  const TokenWeightVector& a_w,
                                                  const TokenWeightVector& a_l, double beta);

}  // namespace twdpo::objectives
