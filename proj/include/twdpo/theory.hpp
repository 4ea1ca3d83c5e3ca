// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "twdpo/tiny_lm.hpp"
#include "twdpo/weights.hpp"

namespace twdpo::theory {

using lm::Tokens;
using weights::TokenWeightVector;

/// One autoregressive decision: outcome `outcome` taken at prefix `node`.
struct Factor {
  std::size_t node = 0;
  std::size_t outcome = 0;
};

/// All sequences of 1..max_len content tokens over a small vocabulary,
/// ordered by length then lexicographically.
///
/// Every non-empty prefix shorter than max_len also offers an end outcome
/// (index `vocab()`); a sequence of length max_len stops without one. The
/// factor count |y| of a sequence therefore includes its end decision.
class EnumSpace {
 public:
  EnumSpace(std::size_t vocab, std::size_t max_len);

  std::size_t vocab() const noexcept { return vocab_; }
  std::size_t max_len() const noexcept { return max_len_; }
  std::size_t size() const noexcept { return sequences_.size(); }
  const Tokens& sequence(std::size_t i) const { return sequences_.at(i); }
  const std::vector<Factor>& factors(std::size_t i) const { return factors_.at(i); }
  /// |y|: content tokens plus the end decision when present.
  std::size_t factor_count(std::size_t i) const { return factors_.at(i).size(); }

  /// Prefixes of length 0..max_len-1.
  std::size_t node_count() const noexcept { return node_len_.size(); }
  std::size_t node_length(std::size_t node) const { return node_len_.at(node); }
  std::size_t outcome_count(std::size_t node) const;
  std::size_t end_outcome() const noexcept { return vocab_; }
  std::size_t node_of(const Tokens& prefix) const;
  std::size_t index_of(const Tokens& sequence) const;

 private:
  std::size_t vocab_;
  std::size_t max_len_;
  std::vector<Tokens> sequences_;
  std::vector<std::vector<Factor>> factors_;
  std::vector<std::size_t> node_len_;
  std::vector<std::size_t> level_offset_;
  std::vector<std::size_t> seq_offset_;
};

/// Sequence distribution with its per-prefix conditionals.
struct TabularPolicy {
  std::vector<double> probs;
  /// conditionals[node][outcome].
  std::vector<std::vector<double>> conditionals;
  /// Explicit normalizer (Z) of the construction, 1 when not applicable.
  double partition_value = 1.0;

  static TabularPolicy from_conditionals(const EnumSpace& space,
                                         std::vector<std::vector<double>> conditionals,
                                         double partition_value = 1.0);
  /// Conditionals are recovered from prefix marginals. Unreached prefixes get
  /// uniform conditionals.
  static TabularPolicy from_sequence_probs(const EnumSpace& space, std::vector<double> probs,
                                           double partition_value = 1.0);

  double expected_length(const EnumSpace& space) const;
  /// Throws invalid_policy if probabilities are negative or do not sum to 1.
  void validate(double tol = 1e-12) const;
};

/// pi_ref(y) exp(r(y)/beta) / Z_DPO with Z_DPO summed explicitly.
TabularPolicy dpo_optimal(const EnumSpace& space, const TabularPolicy& ref,
                          const std::vector<double>& rewards, double beta);

/// Effective weights w^t = |y| a^t per sequence.
using SequenceWeights = std::vector<TokenWeightVector>;

/// Autoregressive policy whose conditionals satisfy, for every sequence,
/// sum_t w^t log(q^t / ref^t) = r/beta - log Z. Solved by damped Newton on
/// the conditionals and log Z; throws numeric_failure without convergence.
TabularPolicy twdpo_heuristic(const EnumSpace& space, const TabularPolicy& ref,
                              const std::vector<double>& rewards, double beta,
                              const SequenceWeights& weights);

/// Largest |sum_t w^t log(q^t/ref^t) - r/beta + log Z| over the space.
double heuristic_residual(const EnumSpace& space, const TabularPolicy& pi, const TabularPolicy& ref,
                          const std::vector<double>& rewards, double beta,
                          const SequenceWeights& weights);

/// R_eps(pi; y) = sum_t eps^t log(pi^t / ref^t) with eps^t = |y| a^t - 1.
/// Throws invalid_policy for a zero reference conditional on a used factor.
std::vector<double> perturbation(const EnumSpace& space, const TabularPolicy& pi,
                                 const TabularPolicy& ref, const SequenceWeights& weights);

struct KlTv {
  double kl = 0.0;
  double tv = 0.0;
};

/// KL(p || q) with 0 log 0 = 0 and TV = sum |p - q| / 2. Throws
/// invalid_policy when q vanishes where p does not.
KlTv kl_tv(const std::vector<double>& p, const std::vector<double>& q);

double max_abs_epsilon(const EnumSpace& space, const SequenceWeights& weights);
/// Largest |log(pi^t / ref^t)| over factors of sequences.
double max_abs_log_ratio(const EnumSpace& space, const TabularPolicy& pi, const TabularPolicy& ref);

struct PerturbationReport {
  double delta = 0.0;
  double C = 0.0;
  double expected_len_dpo = 0.0;
  double expected_len_heuristic = 0.0;
  double kl_forward = 0.0;
  double kl_reverse = 0.0;
  double tv = 0.0;
  double bound_rhs = 0.0;
  /// |KL_fwd + KL_rev - (E_dpo[R] - E_heuristic[R])|.
  double identity_gap = 0.0;
  double max_r_excess = 0.0;
  bool pinsker_ok = false;
  bool satisfied = false;
};

PerturbationReport check_bounds(const EnumSpace& space, const TabularPolicy& ref,
                                const std::vector<double>& rewards, double beta,
                                const SequenceWeights& weights);

struct Instance {
  TabularPolicy ref;
  std::vector<double> rewards;
  double beta = 1.0;
  SequenceWeights weights;
  /// Scale applied to the Dirichlet-drawn deviations (0 gives uniform weights).
  double epsilon_scale = 0.0;
};

/// Dirichlet(1) reference conditionals, rewards in [-1, 1], beta in
/// [0.5, 2], per-sequence Dirichlet weights whose deviation from uniform is
/// scaled by a factor drawn from [0.05, 0.5] (or `epsilon_scale` if >= 0).
Instance random_instance(const EnumSpace& space, std::uint64_t seed, double epsilon_scale = -1.0);

/// Same instance with every eps^t multiplied by `factor`.
SequenceWeights scale_epsilon(const EnumSpace& space, const SequenceWeights& weights, double factor);

/// Token-weighted objective E_pi[r - beta sum_t w^t log(pi^t / ref^t)].
double twdpo_objective(const EnumSpace& space, const TabularPolicy& pi, const TabularPolicy& ref,
                       const std::vector<double>& rewards, double beta,
                       const SequenceWeights& weights);

/// Gradient of twdpo_objective with respect to per-prefix softmax logits of
/// pi, laid out as [node][outcome].
std::vector<std::vector<double>> twdpo_objective_grad(const EnumSpace& space,
                                                      const TabularPolicy& pi,
                                                      const TabularPolicy& ref,
                                                      const std::vector<double>& rewards,
                                                      double beta, const SequenceWeights& weights);

struct OptimumReport {
  TabularPolicy policy;
  double objective = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  double kl_opt_dpo = 0.0;
  double C = 0.0;
  double bound_rhs = 0.0;
  bool lemma_holds = false;
};

/// Best-effort maximizer of the token-weighted objective by gradient ascent
/// over conditional logits, started from pi_DPO, and the optima distance
/// comparison against it. Informational only.
OptimumReport approximate_optimum(const EnumSpace& space, const Instance& inst,
                                  std::size_t max_iterations = 20000, double tol = 1e-9);

/// Report fields as "key = value" lines.
std::string to_text(const PerturbationReport& r);

}  // namespace twdpo::theory
