// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/gradcheck.hpp"

#include <algorithm>
#include <random>

#include "twdpo/numerics.hpp"

namespace twdpo::objectives {

using lm::NamedTensor;
using lm::Tokens;
using numerics::NodeId;
using numerics::Tensor;
using numerics::Trace;

namespace {

std::vector<double> flatten(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const Tensor& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

Tokens draw_tokens(std::mt19937_64& rng, std::size_t lo, std::size_t hi, std::size_t vocab) {
  std::uniform_int_distribution<std::size_t> len(lo, hi);
  std::uniform_int_distribution<lm::TokenId> tok(0, static_cast<lm::TokenId>(vocab - 1));
  Tokens out(len(rng));
  for (auto& t : out) t = tok(rng);
  return out;
}

TokenWeightVector draw_weights(std::mt19937_64& rng, std::size_t n) {
  std::gamma_distribution<double> g(1.0, 1.0);
  TokenWeightVector a;
  for (std::size_t i = 0; i < n; ++i) a.weights.push_back(g(rng));
  const double s = a.sum();
  for (double& w : a.weights) w /= s;
  a.normalized = true;
  return a;
}

}  // namespace

double GradCheckResult::worst() const {
  return std::max({reverse_vs_analytic, reverse_vs_finite, analytic_vs_finite});
}

lm::ModelConfig gradcheck_model_config() {
  lm::ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 12;
  c.mlp_ratio = 2;
  return c;
}

GradCheckResult run_gradient_check(std::uint64_t seed, double h) {
  std::mt19937_64 rng(seed);
  lm::ModelConfig cfg = gradcheck_model_config();
  cfg.init_seed = rng();
  const lm::TinyTransformer ref_model = lm::TinyTransformer(cfg).clone_frozen();

  // Policy: the reference with every parameter perturbed so that ratios are
  // non-zero and the sigmoid coefficient is away from 1/2.
  lm::TinyTransformer policy = ref_model.clone_trainable();
  std::normal_distribution<double> noise(0.0, 0.3);
  policy.update([&](std::vector<NamedTensor>& ps) {
    for (auto& p : ps) {
      for (double& v : p.value.values()) v += noise(rng);
    }
  });

  const Tokens prompt = draw_tokens(rng, 1, 3, cfg.vocab_size);
  const Tokens y_w = draw_tokens(rng, 1, 4, cfg.vocab_size);
  Tokens y_l = draw_tokens(rng, 1, 4, cfg.vocab_size);
  while (y_l == y_w) {
    y_l = draw_tokens(rng, 1, 4, cfg.vocab_size);
  }
  const TokenWeightVector a_w = draw_weights(rng, y_w.size());
  const TokenWeightVector a_l = draw_weights(rng, y_l.size());
  std::uniform_real_distribution<double> beta_dist(0.5, 1.5);
  const double beta = beta_dist(rng);
  const LossConfig loss_cfg{beta, LossVariant::twdpo};

  PairLogProbs p;
  p.chosen_ref = lm::token_logprobs(ref_model, prompt, y_w);
  p.rejected_ref = lm::token_logprobs(ref_model, prompt, y_l);
  const Coefficients coef = coefficients(y_w.size(), y_l.size(), a_w, a_l, loss_cfg);

  Trace trace;
  const lm::BoundParameters bound = lm::bind_parameters(trace, policy, true);
  const NodeId lw = lm::traced_token_logprobs(trace, bound, cfg, prompt, y_w);
  const NodeId ll = lm::traced_token_logprobs(trace, bound, cfg, prompt, y_l);
  const NodeId loss = traced_loss(trace, lw, ll, p.chosen_ref, p.rejected_ref, coef);
  p.chosen_theta = trace.value(lw).values();
  p.rejected_theta = trace.value(ll).values();

  const auto reverse = flatten(numerics::reverse_grad(trace, loss));
  const auto analytic = flatten(analytic_twdpo_grad(trace, lw, ll, p, a_w, a_l, beta));

  std::vector<Tensor> leaf_values;
  for (NodeId id : trace.leaves()) leaf_values.push_back(trace.value(id));
  const auto f = [&](std::span<const double> theta) {
    std::vector<Tensor> vals = leaf_values;
    std::size_t pos = 0;
    for (Tensor& v : vals) {
      std::copy_n(theta.begin() + static_cast<std::ptrdiff_t>(pos), v.size(), v.values().begin());
      pos += v.size();
    }
    return trace.replay(vals).value(loss)[0];
  };
  const auto finite = numerics::finite_diff_grad(f, flatten(leaf_values), h);

  GradCheckResult r;
  r.parameters = reverse.size();
  r.reverse_vs_analytic = numerics::relative_error(reverse, analytic);
  r.reverse_vs_finite = numerics::relative_error(reverse, finite);
  r.analytic_vs_finite = numerics::relative_error(analytic, finite);
  return r;
}

}  // namespace twdpo::objectives
