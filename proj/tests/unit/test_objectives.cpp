// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

#include "twdpo/error.hpp"
#include "twdpo/gradcheck.hpp"
#include "twdpo/objectives.hpp"

using namespace twdpo;
using namespace twdpo::objectives;
using weights::uniform_weights;

namespace {

PairLogProbs random_pair(std::mt19937_64& rng, std::size_t lw, std::size_t ll) {
  std::uniform_real_distribution<double> u(-6.0, -0.01);
  PairLogProbs p;
  for (std::size_t i = 0; i < lw; ++i) {
    p.chosen_theta.push_back(u(rng));
    p.chosen_ref.push_back(u(rng));
  }
  for (std::size_t i = 0; i < ll; ++i) {
    p.rejected_theta.push_back(u(rng));
    p.rejected_ref.push_back(u(rng));
  }
  return p;
}

TokenWeightVector random_weights(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TokenWeightVector a;
  for (std::size_t i = 0; i < n; ++i) a.weights.push_back(u(rng));
  return weights::normalize(a);
}

// Straight-line evaluation of -log(1 / (1 + exp(-z))).
double naive_neg_log_sigmoid(double z) { return -std::log(1.0 / (1.0 + std::exp(-z))); }

}  // namespace

TEST_CASE("preference probability") {
  CHECK(preference_prob(1.3, 1.3) == 0.5);
  CHECK(std::abs(preference_prob(std::log(3.0), 0.0) - 0.75) < 1e-15);
  CHECK(std::abs(preference_prob(2.0, -1.0) + preference_prob(-1.0, 2.0) - 1.0) < 1e-15);
  CHECK(preference_prob(2.0 + 40.0, -1.0 + 40.0) == doctest::Approx(preference_prob(2.0, -1.0)));
}

TEST_CASE("dpo loss examples") {
  std::mt19937_64 rng(1);
  PairLogProbs same = random_pair(rng, 3, 5);
  same.chosen_ref = same.chosen_theta;
  same.rejected_ref = same.rejected_theta;
  CHECK(std::abs(dpo_loss(same, 0.1) - std::numbers::ln2) < 1e-15);

  double prev = dpo_loss(same, 0.1);
  for (double m = 1.0; m <= 200.0; m *= 2.0) {
    PairLogProbs p = same;
    p.chosen_theta[0] += m;
    const double l = dpo_loss(p, 0.1);
    CHECK(l < prev);
    CHECK(l > 0.0);
    prev = l;
  }

  for (int trial = 0; trial < 100; ++trial) {
    const PairLogProbs p = random_pair(rng, 4, 6);
    double sw = 0.0;
    double sl = 0.0;
    for (std::size_t t = 0; t < 4; ++t) sw += p.chosen_theta[t] - p.chosen_ref[t];
    for (std::size_t t = 0; t < 6; ++t) sl += p.rejected_theta[t] - p.rejected_ref[t];
    const double beta = 0.3;
    CHECK(std::abs(dpo_loss(p, beta) - naive_neg_log_sigmoid(beta * sw - beta * sl)) < 1e-12);
  }
}

TEST_CASE("twdpo reduces to dpo under uniform weights") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> len(1, 40);
  for (int trial = 0; trial < 1000; ++trial) {
    const PairLogProbs p = random_pair(rng, len(rng), len(rng));
    const auto aw = uniform_weights(p.chosen_theta.size());
    const auto al = uniform_weights(p.rejected_theta.size());
    CHECK(std::abs(twdpo_loss(p, aw, al, 0.05) - dpo_loss(p, 0.05)) <= 1e-12);
  }
}

TEST_CASE("identity policy gives ln 2 for every variant") {
  std::mt19937_64 rng(3);
  PairLogProbs p = random_pair(rng, 5, 2);
  p.chosen_ref = p.chosen_theta;
  p.rejected_ref = p.rejected_theta;
  const auto aw = random_weights(rng, 5);
  const auto al = random_weights(rng, 2);
  for (LossVariant v : {LossVariant::dpo, LossVariant::twdpo, LossVariant::twdpo_lennorm}) {
    CHECK(std::abs(loss(p, aw, al, {0.7, v}) - std::numbers::ln2) <= 1e-12);
  }
}

TEST_CASE("one-hot weights isolate a token") {
  std::mt19937_64 rng(4);
  const PairLogProbs p = random_pair(rng, 6, 3);
  TokenWeightVector aw{std::vector<double>(6, 0.0), true};
  aw.weights[2] = 1.0;
  TokenWeightVector al{std::vector<double>(3, 0.0), true};
  al.weights[0] = 1.0;
  const double beta = 0.2;
  const double z = beta * 6.0 * (p.chosen_theta[2] - p.chosen_ref[2]) -
                   beta * 3.0 * (p.rejected_theta[0] - p.rejected_ref[0]);
  CHECK(std::abs(twdpo_loss(p, aw, al, beta) - naive_neg_log_sigmoid(z)) < 1e-12);
  PairLogProbs q = p;
  q.chosen_theta[4] += 1.0;
  CHECK(twdpo_loss(q, aw, al, beta) == twdpo_loss(p, aw, al, beta));
}

TEST_CASE("length-normalized variant") {
  std::mt19937_64 rng(5);
  const PairLogProbs one = random_pair(rng, 1, 1);
  const auto a1 = uniform_weights(1);
  CHECK(twdpo_loss_lennorm(one, a1, a1, 0.4) == twdpo_loss(one, a1, a1, 0.4));

  const PairLogProbs p = random_pair(rng, 4, 7);
  double mw = 0.0;
  double ml = 0.0;
  for (std::size_t t = 0; t < 4; ++t) mw += (p.chosen_theta[t] - p.chosen_ref[t]) / 4.0;
  for (std::size_t t = 0; t < 7; ++t) ml += (p.rejected_theta[t] - p.rejected_ref[t]) / 7.0;
  CHECK(std::abs(twdpo_loss_lennorm(p, uniform_weights(4), uniform_weights(7), 2.0) -
                 naive_neg_log_sigmoid(2.0 * mw - 2.0 * ml)) < 1e-12);
  CHECK(LossConfig::default_beta(LossVariant::twdpo_lennorm) == 2.0);
  CHECK(LossConfig::default_beta(LossVariant::twdpo) == 5e-3);
}

TEST_CASE("weight length mismatch names the example") {
  std::mt19937_64 rng(6);
  const PairLogProbs p = random_pair(rng, 3, 3);
  try {
    twdpo_loss(p, uniform_weights(2), uniform_weights(3), 0.1, "ex-9");
    FAIL("expected mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::weight_length_mismatch);
    CHECK(std::string(e.what()).find("ex-9") != std::string::npos);
  }
}

TEST_CASE("implicit rewards") {
  std::mt19937_64 rng(7);
  const PairLogProbs p = random_pair(rng, 5, 5);
  CHECK(implicit_reward(p.chosen_theta, p.chosen_theta, random_weights(rng, 5), 0.3) == 0.0);
  double s = 0.0;
  for (std::size_t t = 0; t < 5; ++t) s += p.chosen_theta[t] - p.chosen_ref[t];
  CHECK(std::abs(implicit_reward(p.chosen_theta, p.chosen_ref, uniform_weights(5), 0.3) - 0.3 * s) <
        1e-12);
  const auto a = random_weights(rng, 5);
  const double r1 = implicit_reward(p.chosen_theta, p.chosen_ref, a, 0.25);
  const double r4 = implicit_reward(p.chosen_theta, p.chosen_ref, a, 1.0);
  CHECK(std::abs(r4 - 4.0 * r1) < 1e-12);
}

TEST_CASE("loss properties") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> bump(0.01, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    const PairLogProbs p = random_pair(rng, 6, 4);
    const auto aw = random_weights(rng, 6);
    const auto al = random_weights(rng, 4);
    const double beta = 0.5;
    const double base = twdpo_loss(p, aw, al, beta);

    PairLogProbs up = p;
    up.chosen_theta[trial % 6] += bump(rng);
    CHECK(twdpo_loss(up, aw, al, beta) <= base);

    PairLogProbs swapped;
    swapped.chosen_theta = p.rejected_theta;
    swapped.chosen_ref = p.rejected_ref;
    swapped.rejected_theta = p.chosen_theta;
    swapped.rejected_ref = p.chosen_ref;
    const double other = twdpo_loss(swapped, al, aw, beta);
    CHECK(std::abs(std::exp(-base) + std::exp(-other) - 1.0) < 1e-12);

    const double rw = implicit_reward(p.chosen_theta, p.chosen_ref, aw, beta);
    const double rl = implicit_reward(p.rejected_theta, p.rejected_ref, al, beta);
    CHECK(std::abs(preference_prob(rw + 3.7, rl + 3.7) - preference_prob(rw, rl)) < 1e-12);
  }
}

TEST_CASE("traced loss matches the direct formula") {
  std::mt19937_64 rng(9);
  for (LossVariant v : {LossVariant::dpo, LossVariant::twdpo, LossVariant::twdpo_lennorm}) {
    const PairLogProbs p = random_pair(rng, 5, 3);
    const auto aw = random_weights(rng, 5);
    const auto al = random_weights(rng, 3);
    const LossConfig cfg{0.6, v};
    numerics::Trace t;
    const auto w = t.leaf(numerics::Tensor::vector(p.chosen_theta));
    const auto l = t.leaf(numerics::Tensor::vector(p.rejected_theta));
    const auto out = traced_loss(t, w, l, p.chosen_ref, p.rejected_ref,
                                 coefficients(5, 3, aw, al, cfg));
    CHECK(std::abs(t.value(out)[0] - loss(p, aw, al, cfg)) < 1e-12);
  }
}

TEST_CASE("analytic gradient on the identity policy and zero weights") {
  std::mt19937_64 rng(10);
  PairLogProbs p = random_pair(rng, 3, 2);
  p.chosen_ref = p.chosen_theta;
  p.rejected_ref = p.rejected_theta;
  numerics::Trace t;
  const auto w = t.leaf(numerics::Tensor::vector(p.chosen_theta));
  const auto l = t.leaf(numerics::Tensor::vector(p.rejected_theta));
  TokenWeightVector aw{{0.5, 0.0, 0.5}, true};
  const auto al = uniform_weights(2);
  const double beta = 0.8;
  const auto g = analytic_twdpo_grad(t, w, l, p, aw, al, beta);
  // d loss / d logp_w[t] = -beta * 0.5 * |y_w| * a_t when ratios vanish.
  CHECK(g[0][0] == doctest::Approx(-beta * 0.5 * 3.0 * 0.5));
  CHECK(g[0][1] == 0.0);
  CHECK(g[1][0] == doctest::Approx(beta * 0.5 * 2.0 * 0.5));
}

TEST_CASE("gradient triple agreement on tiny models") {
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const GradCheckResult r = run_gradient_check(seed);
    CAPTURE(seed);
    CHECK(r.reverse_vs_analytic < 1e-8);
    CHECK(r.reverse_vs_finite < 1e-5);
    CHECK(r.analytic_vs_finite < 1e-5);
    CHECK(r.parameters > 1000);
  }
  MESSAGE("three instances in "
          << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
          << " s");
}
