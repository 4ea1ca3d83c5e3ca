// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/objectives.hpp"

#include <cmath>

#include "twdpo/error.hpp"
#include "twdpo/numerics.hpp"

namespace twdpo::objectives {

using numerics::NodeId;
using numerics::Tensor;
using numerics::Trace;

namespace {

void check_lengths(std::size_t n, const TokenWeightVector& a, const std::string& role,
                   const std::string& example_id) {
  if (a.size() != n) {
    throw Error(ErrorKind::weight_length_mismatch,
                "example '" + example_id + "' " + role + ": " + std::to_string(a.size()) +
                    " weights for " + std::to_string(n) + " tokens");
  }
}

double weighted_ratio_sum(std::span<const double> theta, std::span<const double> ref,
                          const std::vector<double>& a) {
  double s = 0.0;
  for (std::size_t t = 0; t < theta.size(); ++t) {
    s += a[t] * (theta[t] - ref[t]);
  }
  return s;
}

double ratio_sum(std::span<const double> theta, std::span<const double> ref) {
  double s = 0.0;
  for (std::size_t t = 0; t < theta.size(); ++t) {
    s += theta[t] - ref[t];
  }
  return s;
}

double weighted_margin(const PairLogProbs& p, const TokenWeightVector& a_w,
                       const TokenWeightVector& a_l, double beta, bool length_scaled,
                       const std::string& example_id) {
  p.validate();
  check_lengths(p.chosen_theta.size(), a_w, "chosen", example_id);
  check_lengths(p.rejected_theta.size(), a_l, "rejected", example_id);
  const double m_w = length_scaled ? static_cast<double>(p.chosen_theta.size()) : 1.0;
  const double m_l = length_scaled ? static_cast<double>(p.rejected_theta.size()) : 1.0;
  return beta * m_w * weighted_ratio_sum(p.chosen_theta, p.chosen_ref, a_w.weights) -
         beta * m_l * weighted_ratio_sum(p.rejected_theta, p.rejected_ref, a_l.weights);
}

}  // namespace

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::dpo: return "dpo";
    case LossVariant::twdpo: return "twdpo";
    case LossVariant::twdpo_lennorm: return "twdpo_lennorm";
  }
  return "?";
}

LossVariant parse_variant(const std::string& text) {
  if (text == "dpo") return LossVariant::dpo;
  if (text == "twdpo") return LossVariant::twdpo;
  if (text == "twdpo_lennorm") return LossVariant::twdpo_lennorm;
  throw Error(ErrorKind::parse_error, "unknown loss variant '" + text + "'");
}

void LossConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw Error(ErrorKind::invalid_argument, "beta must be positive");
  }
}

double LossConfig::default_beta(LossVariant v) {
  return v == LossVariant::twdpo_lennorm ? 2.0 : 5e-3;
}

void PairLogProbs::validate() const {
  if (chosen_theta.empty() || rejected_theta.empty()) {
    throw Error(ErrorKind::invalid_argument, "responses must be non-empty");
  }
  if (chosen_theta.size() != chosen_ref.size() || rejected_theta.size() != rejected_ref.size()) {
    throw Error(ErrorKind::invalid_argument, "policy and reference log-probs differ in length");
  }
}

double preference_prob(double r_w, double r_l) { return numerics::sigmoid(r_w - r_l); }

double dpo_loss(const PairLogProbs& p, double beta) {
  p.validate();
  const double z = beta * ratio_sum(p.chosen_theta, p.chosen_ref) -
                   beta * ratio_sum(p.rejected_theta, p.rejected_ref);
  return numerics::softplus(-z);
}

double twdpo_loss(const PairLogProbs& p, const TokenWeightVector& a_w,
                  const TokenWeightVector& a_l, double beta, const std::string& example_id) {
  return numerics::softplus(-weighted_margin(p, a_w, a_l, beta, true, example_id));
}

double twdpo_loss_lennorm(const PairLogProbs& p, const TokenWeightVector& a_w,
                          const TokenWeightVector& a_l, double beta,
                          const std::string& example_id) {
  return numerics::softplus(-weighted_margin(p, a_w, a_l, beta, false, example_id));
}

double loss(const PairLogProbs& p, const TokenWeightVector& a_w, const TokenWeightVector& a_l,
            const LossConfig& cfg, const std::string& example_id) {
  cfg.validate();
  switch (cfg.variant) {
    case LossVariant::dpo: return dpo_loss(p, cfg.beta);
    case LossVariant::twdpo: return twdpo_loss(p, a_w, a_l, cfg.beta, example_id);
    case LossVariant::twdpo_lennorm: return twdpo_loss_lennorm(p, a_w, a_l, cfg.beta, example_id);
  }
  return 0.0;
}

double implicit_reward(std::span<const double> theta, std::span<const double> ref,
                       const TokenWeightVector& a, double beta) {
  if (theta.size() != ref.size()) {
    throw Error(ErrorKind::invalid_argument, "policy and reference log-probs differ in length");
  }
  check_lengths(theta.size(), a, "response", "");
  return beta * static_cast<double>(theta.size()) * weighted_ratio_sum(theta, ref, a.weights);
}

Coefficients coefficients(std::size_t len_w, std::size_t len_l, const TokenWeightVector& a_w,
                          const TokenWeightVector& a_l, const LossConfig& cfg,
                          const std::string& example_id) {
  cfg.validate();
  Coefficients c;
  if (cfg.variant == LossVariant::dpo) {
    c.chosen.assign(len_w, cfg.beta);
    c.rejected.assign(len_l, cfg.beta);
    return c;
  }
  check_lengths(len_w, a_w, "chosen", example_id);
  check_lengths(len_l, a_l, "rejected", example_id);
  const bool scaled = cfg.variant == LossVariant::twdpo;
  const double m_w = scaled ? static_cast<double>(len_w) : 1.0;
  const double m_l = scaled ? static_cast<double>(len_l) : 1.0;
  for (double a : a_w.weights) c.chosen.push_back(cfg.beta * m_w * a);
  for (double a : a_l.weights) c.rejected.push_back(cfg.beta * m_l * a);
  return c;
}

NodeId traced_loss(Trace& trace, NodeId chosen_theta, NodeId rejected_theta,
                   std::span<const double> chosen_ref, std::span<const double> rejected_ref,
                   const Coefficients& c) {
  double ref_margin = 0.0;
  for (std::size_t t = 0; t < chosen_ref.size(); ++t) ref_margin += c.chosen[t] * chosen_ref[t];
  for (std::size_t t = 0; t < rejected_ref.size(); ++t) {
    ref_margin -= c.rejected[t] * rejected_ref[t];
  }
  const NodeId w = trace.weighted_sum(chosen_theta, c.chosen);
  const NodeId l = trace.weighted_sum(rejected_theta, c.rejected);
  const NodeId z = trace.sub(trace.sub(w, l), trace.constant(Tensor::scalar(ref_margin)));
  return trace.scale(trace.log_sigmoid(z), -1.0);
}

std::vector<Tensor> analytic_twdpo_grad(Trace& trace, NodeId chosen_theta, NodeId rejected_theta,
                                        const PairLogProbs& p, const TokenWeightVector& a_w,
                                        const TokenWeightVector& a_l, double beta) {
  p.validate();
  check_lengths(p.chosen_theta.size(), a_w, "chosen", "");
  check_lengths(p.rejected_theta.size(), a_l, "rejected", "");
  const double r_w = implicit_reward(p.chosen_theta, p.chosen_ref, a_w, beta);
  const double r_l = implicit_reward(p.rejected_theta, p.rejected_ref, a_l, beta);
  const double coef = -beta * numerics::sigmoid(r_l - r_w);

  std::vector<Tensor> total;
  const auto accumulate = [&](NodeId logp, const TokenWeightVector& a, double sign) {
    const double len = static_cast<double>(a.size());
    for (std::size_t t = 0; t < a.size(); ++t) {
      if (a.weights[t] == 0.0) {
        continue;
      }
      const std::size_t idx[] = {t};
      const auto g = numerics::reverse_grad(trace, trace.pick(logp, idx));
      if (total.empty()) {
        for (const Tensor& gi : g) total.push_back(Tensor::zeros_like(gi));
      }
      const double factor = coef * sign * len * a.weights[t];
      for (std::size_t k = 0; k < g.size(); ++k) {
        for (std::size_t i = 0; i < g[k].size(); ++i) total[k][i] += factor * g[k][i];
      }
    }
  };
  accumulate(chosen_theta, a_w, 1.0);
  accumulate(rejected_theta, a_l, -1.0);
  if (total.empty()) {
    for (NodeId leaf : trace.leaves()) total.push_back(Tensor::zeros_like(trace.value(leaf)));
  }
  return total;
}

}  // namespace twdpo::objectives
