// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/theory.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <random>

#include "twdpo/error.hpp"
#include "twdpo/kvtext.hpp"
#include "twdpo/numerics.hpp"

namespace twdpo::theory {
namespace {

std::size_t ipow(std::size_t base, std::size_t exp) {
  std::size_t out = 1;
  for (std::size_t i = 0; i < exp; ++i) out *= base;
  return out;
}

std::size_t base_value(const Tokens& t, std::size_t begin, std::size_t end, std::size_t base) {
  std::size_t v = 0;
  for (std::size_t i = begin; i < end; ++i) v = v * base + t[i];
  return v;
}

void check_sizes(const EnumSpace& space, const TabularPolicy& p, const char* what) {
  if (p.probs.size() != space.size() || p.conditionals.size() != space.node_count()) {
    throw Error(ErrorKind::invalid_argument, std::string(what) + " does not match the space");
  }
}

void check_weights(const EnumSpace& space, const SequenceWeights& w) {
  if (w.size() != space.size()) {
    throw Error(ErrorKind::invalid_argument, "need one weight vector per sequence");
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i].size() != space.factor_count(i)) {
      throw Error(ErrorKind::weight_length_mismatch,
                  "sequence " + std::to_string(i) + " has " + std::to_string(space.factor_count(i)) +
                      " factors but " + std::to_string(w[i].size()) + " weights");
    }
  }
}

double effective_weight(const SequenceWeights& w, std::size_t i, std::size_t t) {
  return static_cast<double>(w[i].size()) * w[i].weights[t];
}

double expectation(const std::vector<double>& p, const std::vector<double>& f) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * f[i];
  return s;
}

}  // namespace

EnumSpace::EnumSpace(std::size_t vocab, std::size_t max_len) : vocab_(vocab), max_len_(max_len) {
  if (vocab < 1 || vocab > 6 || max_len < 1 || max_len > 5) {
    throw Error(ErrorKind::invalid_argument, "enumerable spaces need 1 <= vocab <= 6, 1 <= max_len <= 5");
  }
  for (std::size_t k = 0; k < max_len_; ++k) {
    level_offset_.push_back(node_len_.size());
    node_len_.insert(node_len_.end(), ipow(vocab_, k), k);
  }
  for (std::size_t n = 1; n <= max_len_; ++n) {
    seq_offset_.push_back(sequences_.size());
    const std::size_t count = ipow(vocab_, n);
    for (std::size_t code = 0; code < count; ++code) {
      Tokens y(n);
      std::size_t c = code;
      for (std::size_t i = n; i-- > 0;) {
        y[i] = static_cast<lm::TokenId>(c % vocab_);
        c /= vocab_;
      }
      std::vector<Factor> f;
      for (std::size_t k = 0; k < n; ++k) {
        f.push_back({level_offset_[k] + base_value(y, 0, k, vocab_), y[k]});
      }
      if (n < max_len_) {
        f.push_back({level_offset_[n] + base_value(y, 0, n, vocab_), vocab_});
      }
      sequences_.push_back(std::move(y));
      factors_.push_back(std::move(f));
    }
  }
}

std::size_t EnumSpace::outcome_count(std::size_t node) const {
  return node_length(node) == 0 ? vocab_ : vocab_ + 1;
}

std::size_t EnumSpace::node_of(const Tokens& prefix) const {
  if (prefix.size() >= max_len_) {
    throw Error(ErrorKind::invalid_argument, "prefix is too long to be a decision node");
  }
  return level_offset_[prefix.size()] + base_value(prefix, 0, prefix.size(), vocab_);
}

std::size_t EnumSpace::index_of(const Tokens& sequence) const {
  if (sequence.empty() || sequence.size() > max_len_) {
    throw Error(ErrorKind::invalid_argument, "sequence length outside the space");
  }
  return seq_offset_[sequence.size() - 1] + base_value(sequence, 0, sequence.size(), vocab_);
}

TabularPolicy TabularPolicy::from_conditionals(const EnumSpace& space,
                                               std::vector<std::vector<double>> conditionals,
                                               double partition_value) {
  if (conditionals.size() != space.node_count()) {
    throw Error(ErrorKind::invalid_argument, "need conditionals for every prefix");
  }
  TabularPolicy p;
  p.conditionals = std::move(conditionals);
  p.partition_value = partition_value;
  p.probs.resize(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) {
    double prob = 1.0;
    for (const Factor& f : space.factors(i)) prob *= p.conditionals[f.node][f.outcome];
    p.probs[i] = prob;
  }
  return p;
}

TabularPolicy TabularPolicy::from_sequence_probs(const EnumSpace& space, std::vector<double> probs,
                                                 double partition_value) {
  if (probs.size() != space.size()) {
    throw Error(ErrorKind::invalid_argument, "need one probability per sequence");
  }
  std::vector<double> mass(space.node_count(), 0.0);
  for (std::size_t i = 0; i < space.size(); ++i) {
    const Tokens& y = space.sequence(i);
    for (std::size_t k = 0; k <= y.size() && k < space.max_len(); ++k) {
      mass[space.node_of(Tokens(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(k)))] += probs[i];
    }
  }
  TabularPolicy p;
  p.probs = std::move(probs);
  p.partition_value = partition_value;
  p.conditionals.resize(space.node_count());
  for (std::size_t node = 0; node < space.node_count(); ++node) {
    p.conditionals[node].assign(space.outcome_count(node), 0.0);
  }
  for (std::size_t i = 0; i < space.size(); ++i) {
    const Tokens& y = space.sequence(i);
    const Tokens parent_prefix(y.begin(), y.end() - 1);
    if (y.size() < space.max_len()) {
      // Stopping here, and reaching the interior prefix y from its parent.
      p.conditionals[space.node_of(y)][space.end_outcome()] += p.probs[i];
      p.conditionals[space.node_of(parent_prefix)][y.back()] = mass[space.node_of(y)];
    } else {
      p.conditionals[space.node_of(parent_prefix)][y.back()] += p.probs[i];
    }
  }
  for (std::size_t node = 0; node < space.node_count(); ++node) {
    auto& row = p.conditionals[node];
    if (mass[node] > 0.0) {
      for (double& v : row) v /= mass[node];
    } else {
      std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(row.size()));
    }
  }
  return p;
}

double TabularPolicy::expected_length(const EnumSpace& space) const {
  double s = 0.0;
  for (std::size_t i = 0; i < space.size(); ++i) {
    s += probs[i] * static_cast<double>(space.factor_count(i));
  }
  return s;
}

void TabularPolicy::validate(double tol) const {
  double s = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw Error(ErrorKind::invalid_policy, "negative or non-finite probability");
    }
    s += p;
  }
  if (std::abs(s - 1.0) > tol) {
    throw Error(ErrorKind::invalid_policy, "probabilities sum to " + format_real(s));
  }
}

TabularPolicy dpo_optimal(const EnumSpace& space, const TabularPolicy& ref,
                          const std::vector<double>& rewards, double beta) {
  check_sizes(space, ref, "reference policy");
  if (rewards.size() != space.size()) {
    throw Error(ErrorKind::invalid_argument, "need one reward per sequence");
  }
  if (!(beta > 0.0)) {
    throw Error(ErrorKind::invalid_argument, "beta must be positive");
  }
  std::vector<double> score(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) {
    if (!std::isfinite(rewards[i])) {
      throw Error(ErrorKind::invalid_argument, "rewards must be finite");
    }
    const double e = std::exp(rewards[i] / beta);
    if (!std::isfinite(e)) {
      throw Error(ErrorKind::numeric_failure, "exp(r / beta) overflows; rescale rewards");
    }
    score[i] = ref.probs[i] * e;
  }
  double z = 0.0;
  for (double s : score) z += s;
  if (!std::isfinite(z) || !(z > 0.0)) {
    throw Error(ErrorKind::numeric_failure, "DPO partition sum is not finite and positive");
  }
  for (double& s : score) s /= z;
  return TabularPolicy::from_sequence_probs(space, std::move(score), z);
}

TabularPolicy twdpo_heuristic(const EnumSpace& space, const TabularPolicy& ref,
                              const std::vector<double>& rewards, double beta,
                              const SequenceWeights& weights) {
  check_weights(space, weights);
  const TabularPolicy start = dpo_optimal(space, ref, rewards, beta);

  // Unknowns: log q for every (node, outcome), then log Z.
  std::vector<std::size_t> var_base(space.node_count());
  std::size_t n_vars = 0;
  for (std::size_t node = 0; node < space.node_count(); ++node) {
    var_base[node] = n_vars;
    n_vars += space.outcome_count(node);
  }
  const std::size_t z_var = n_vars++;
  const std::size_t n_eq = space.size() + space.node_count();
  if (n_eq != n_vars) {
    throw Error(ErrorKind::numeric_failure, "heuristic system is not square");
  }

  Eigen::VectorXd x(static_cast<Eigen::Index>(n_vars));
  for (std::size_t node = 0; node < space.node_count(); ++node) {
    for (std::size_t o = 0; o < space.outcome_count(node); ++o) {
      const double q = start.conditionals[node][o];
      x[static_cast<Eigen::Index>(var_base[node] + o)] = std::log(std::max(q, 1e-300));
    }
  }
  x[static_cast<Eigen::Index>(z_var)] = std::log(start.partition_value);

  const auto residual = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd f(static_cast<Eigen::Index>(n_eq));
    for (std::size_t i = 0; i < space.size(); ++i) {
      double s = -rewards[i] / beta + v[static_cast<Eigen::Index>(z_var)];
      const auto& fs = space.factors(i);
      for (std::size_t t = 0; t < fs.size(); ++t) {
        const double lq = v[static_cast<Eigen::Index>(var_base[fs[t].node] + fs[t].outcome)];
        s += effective_weight(weights, i, t) * (lq - std::log(ref.conditionals[fs[t].node][fs[t].outcome]));
      }
      f[static_cast<Eigen::Index>(i)] = s;
    }
    for (std::size_t node = 0; node < space.node_count(); ++node) {
      double s = -1.0;
      for (std::size_t o = 0; o < space.outcome_count(node); ++o) {
        s += std::exp(v[static_cast<Eigen::Index>(var_base[node] + o)]);
      }
      f[static_cast<Eigen::Index>(space.size() + node)] = s;
    }
    return f;
  };

  Eigen::VectorXd f = residual(x);
  constexpr int kMaxIter = 100;
  for (int iter = 0; iter < kMaxIter && f.lpNorm<Eigen::Infinity>() > 1e-14; ++iter) {
    std::vector<Eigen::Triplet<double>> trip;
    for (std::size_t i = 0; i < space.size(); ++i) {
      const auto& fs = space.factors(i);
      for (std::size_t t = 0; t < fs.size(); ++t) {
        trip.emplace_back(static_cast<int>(i), static_cast<int>(var_base[fs[t].node] + fs[t].outcome),
                          effective_weight(weights, i, t));
      }
      trip.emplace_back(static_cast<int>(i), static_cast<int>(z_var), 1.0);
    }
    for (std::size_t node = 0; node < space.node_count(); ++node) {
      for (std::size_t o = 0; o < space.outcome_count(node); ++o) {
        const std::size_t col = var_base[node] + o;
        trip.emplace_back(static_cast<int>(space.size() + node), static_cast<int>(col),
                          std::exp(x[static_cast<Eigen::Index>(col)]));
      }
    }
    Eigen::SparseMatrix<double> jac(static_cast<Eigen::Index>(n_eq), static_cast<Eigen::Index>(n_vars));
    jac.setFromTriplets(trip.begin(), trip.end());
    Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
    lu.compute(jac);
    if (lu.info() != Eigen::Success) {
      throw Error(ErrorKind::numeric_failure, "heuristic Jacobian is singular");
    }
    const Eigen::VectorXd step = lu.solve(-f);
    if (lu.info() != Eigen::Success || !step.allFinite()) {
      throw Error(ErrorKind::numeric_failure, "heuristic Newton step failed");
    }
    const double norm = f.norm();
    double alpha = 1.0;
    Eigen::VectorXd next = x + step;
    Eigen::VectorXd fn = residual(next);
    while (!(fn.norm() < norm) && alpha > 1e-10) {
      alpha *= 0.5;
      next = x + alpha * step;
      fn = residual(next);
    }
    if (!(fn.norm() < norm)) {
      break;
    }
    x = std::move(next);
    f = std::move(fn);
  }
  if (!(f.lpNorm<Eigen::Infinity>() <= 1e-11)) {
    throw Error(ErrorKind::numeric_failure,
                "heuristic policy did not converge (residual " +
                    format_real(f.lpNorm<Eigen::Infinity>()) + ")");
  }

  std::vector<std::vector<double>> cond(space.node_count());
  for (std::size_t node = 0; node < space.node_count(); ++node) {
    double s = 0.0;
    for (std::size_t o = 0; o < space.outcome_count(node); ++o) {
      cond[node].push_back(std::exp(x[static_cast<Eigen::Index>(var_base[node] + o)]));
      s += cond[node].back();
    }
    for (double& q : cond[node]) q /= s;
  }
  return TabularPolicy::from_conditionals(space, std::move(cond),
                                          std::exp(x[static_cast<Eigen::Index>(z_var)]));
}

double heuristic_residual(const EnumSpace& space, const TabularPolicy& pi, const TabularPolicy& ref,
                          const std::vector<double>& rewards, double beta,
                          const SequenceWeights& weights) {
  check_weights(space, weights);
  const double log_z = std::log(pi.partition_value);
  double worst = 0.0;
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto& fs = space.factors(i);
    double s = -rewards[i] / beta + log_z;
    for (std::size_t t = 0; t < fs.size(); ++t) {
      s += effective_weight(weights, i, t) * std::log(pi.conditionals[fs[t].node][fs[t].outcome] /
                                                      ref.conditionals[fs[t].node][fs[t].outcome]);
    }
    worst = std::max(worst, std::abs(s));
  }
  return worst;
}

std::vector<double> perturbation(const EnumSpace& space, const TabularPolicy& pi,
                                 const TabularPolicy& ref, const SequenceWeights& weights) {
  check_sizes(space, pi, "policy");
  check_sizes(space, ref, "reference policy");
  check_weights(space, weights);
  std::vector<double> out(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto& fs = space.factors(i);
    double s = 0.0;
    for (std::size_t t = 0; t < fs.size(); ++t) {
      const double q = pi.conditionals[fs[t].node][fs[t].outcome];
      const double p = ref.conditionals[fs[t].node][fs[t].outcome];
      if (!(p > 0.0) || !(q > 0.0)) {
        throw Error(ErrorKind::invalid_policy,
                    "zero conditional on a factor of sequence " + std::to_string(i));
      }
      s += (effective_weight(weights, i, t) - 1.0) * std::log(q / p);
    }
    out[i] = s;
  }
  return out;
}

KlTv kl_tv(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) {
    throw Error(ErrorKind::invalid_argument, "distributions differ in size");
  }
  KlTv out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    out.tv += std::abs(p[i] - q[i]);
    if (p[i] > 0.0) {
      if (!(q[i] > 0.0)) {
        throw Error(ErrorKind::invalid_policy, "q is zero where p is positive");
      }
      // p log(p/q) - p + q is non-negative term by term.
      out.kl += p[i] * std::log(p[i] / q[i]) - p[i] + q[i];
    } else {
      out.kl += q[i];
    }
  }
  out.tv *= 0.5;
  return out;
}

double max_abs_epsilon(const EnumSpace& space, const SequenceWeights& weights) {
  check_weights(space, weights);
  double d = 0.0;
  for (std::size_t i = 0; i < space.size(); ++i) {
    for (std::size_t t = 0; t < weights[i].size(); ++t) {
      d = std::max(d, std::abs(effective_weight(weights, i, t) - 1.0));
    }
  }
  return d;
}

double max_abs_log_ratio(const EnumSpace& space, const TabularPolicy& pi, const TabularPolicy& ref) {
  double c = 0.0;
  for (std::size_t i = 0; i < space.size(); ++i) {
    for (const Factor& f : space.factors(i)) {
      c = std::max(c, std::abs(std::log(pi.conditionals[f.node][f.outcome] /
                                        ref.conditionals[f.node][f.outcome])));
    }
  }
  return c;
}

PerturbationReport check_bounds(const EnumSpace& space, const TabularPolicy& ref,
                                const std::vector<double>& rewards, double beta,
                                const SequenceWeights& weights) {
  const TabularPolicy dpo = dpo_optimal(space, ref, rewards, beta);
  const TabularPolicy heur = twdpo_heuristic(space, ref, rewards, beta, weights);
  PerturbationReport r;
  r.delta = max_abs_epsilon(space, weights);
  r.C = max_abs_log_ratio(space, heur, ref);
  r.expected_len_dpo = dpo.expected_length(space);
  r.expected_len_heuristic = heur.expected_length(space);
  const KlTv fwd = kl_tv(heur.probs, dpo.probs);
  const KlTv rev = kl_tv(dpo.probs, heur.probs);
  r.kl_forward = fwd.kl;
  r.kl_reverse = rev.kl;
  r.tv = fwd.tv;
  const std::vector<double> R = perturbation(space, heur, ref, weights);
  r.identity_gap = std::abs(r.kl_forward + r.kl_reverse -
                            (expectation(dpo.probs, R) - expectation(heur.probs, R)));
  r.max_r_excess = -INFINITY;
  for (std::size_t i = 0; i < space.size(); ++i) {
    r.max_r_excess = std::max(
        r.max_r_excess, std::abs(R[i]) - static_cast<double>(space.factor_count(i)) * r.delta * r.C);
  }
  r.bound_rhs = r.delta * r.C * (r.expected_len_dpo + r.expected_len_heuristic);
  r.pinsker_ok = r.tv <= std::sqrt(r.kl_forward / 2.0) + 1e-12;
  r.satisfied = r.kl_forward <= r.bound_rhs + 1e-9;
  return r;
}

Instance random_instance(const EnumSpace& space, std::uint64_t seed, double epsilon_scale) {
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(1.0, 1.0);
  std::uniform_real_distribution<double> reward(-1.0, 1.0);
  std::uniform_real_distribution<double> beta(0.5, 2.0);
  std::uniform_real_distribution<double> scale(0.05, 0.5);

  Instance inst;
  std::vector<std::vector<double>> cond(space.node_count());
  for (std::size_t node = 0; node < space.node_count(); ++node) {
    double s = 0.0;
    for (std::size_t o = 0; o < space.outcome_count(node); ++o) {
      cond[node].push_back(gamma(rng));
      s += cond[node].back();
    }
    for (double& q : cond[node]) q /= s;
  }
  inst.ref = TabularPolicy::from_conditionals(space, std::move(cond));
  for (std::size_t i = 0; i < space.size(); ++i) inst.rewards.push_back(reward(rng));
  inst.beta = beta(rng);
  inst.epsilon_scale = epsilon_scale >= 0.0 ? epsilon_scale : scale(rng);

  SequenceWeights raw;
  for (std::size_t i = 0; i < space.size(); ++i) {
    TokenWeightVector a;
    double s = 0.0;
    for (std::size_t t = 0; t < space.factor_count(i); ++t) {
      a.weights.push_back(gamma(rng));
      s += a.weights.back();
    }
    for (double& w : a.weights) w /= s;
    a.normalized = true;
    raw.push_back(std::move(a));
  }
  inst.weights = scale_epsilon(space, raw, inst.epsilon_scale);
  return inst;
}

SequenceWeights scale_epsilon(const EnumSpace& space, const SequenceWeights& weights, double factor) {
  check_weights(space, weights);
  SequenceWeights out;
  for (std::size_t i = 0; i < space.size(); ++i) {
    const double m = static_cast<double>(weights[i].size());
    TokenWeightVector a;
    a.normalized = true;
    for (std::size_t t = 0; t < weights[i].size(); ++t) {
      const double eps = factor * (m * weights[i].weights[t] - 1.0);
      a.weights.push_back((1.0 + eps) / m);
    }
    out.push_back(std::move(a));
  }
  return out;
}

double twdpo_objective(const EnumSpace& space, const TabularPolicy& pi, const TabularPolicy& ref,
                       const std::vector<double>& rewards, double beta,
                       const SequenceWeights& weights) {
  check_weights(space, weights);
  double j = 0.0;
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto& fs = space.factors(i);
    double penalty = 0.0;
    for (std::size_t t = 0; t < fs.size(); ++t) {
      penalty += effective_weight(weights, i, t) *
                 std::log(pi.conditionals[fs[t].node][fs[t].outcome] /
                          ref.conditionals[fs[t].node][fs[t].outcome]);
    }
    j += pi.probs[i] * (rewards[i] - beta * penalty);
  }
  return j;
}

std::vector<std::vector<double>> twdpo_objective_grad(const EnumSpace& space,
                                                      const TabularPolicy& pi,
                                                      const TabularPolicy& ref,
                                                      const std::vector<double>& rewards,
                                                      double beta, const SequenceWeights& weights) {
  check_weights(space, weights);
  std::vector<std::vector<double>> g(space.node_count());
  for (std::size_t node = 0; node < space.node_count(); ++node) {
    g[node].assign(space.outcome_count(node), 0.0);
  }
  for (std::size_t i = 0; i < space.size(); ++i) {
    const auto& fs = space.factors(i);
    double value = rewards[i];
    for (std::size_t t = 0; t < fs.size(); ++t) {
      value -= beta * effective_weight(weights, i, t) *
               std::log(pi.conditionals[fs[t].node][fs[t].outcome] /
                        ref.conditionals[fs[t].node][fs[t].outcome]);
    }
    // d log q(o_t | n) / d logit(o' | n) = 1[o' = o_t] - q(o' | n).
    for (std::size_t t = 0; t < fs.size(); ++t) {
      const double c = pi.probs[i] * (value - beta * effective_weight(weights, i, t));
      const auto& q = pi.conditionals[fs[t].node];
      auto& row = g[fs[t].node];
      for (std::size_t o = 0; o < row.size(); ++o) {
        row[o] += c * ((o == fs[t].outcome ? 1.0 : 0.0) - q[o]);
      }
    }
  }
  return g;
}

OptimumReport approximate_optimum(const EnumSpace& space, const Instance& inst,
                                  std::size_t max_iterations, double tol) {
  const TabularPolicy dpo = dpo_optimal(space, inst.ref, inst.rewards, inst.beta);
  std::vector<std::vector<double>> logits(space.node_count());
  for (std::size_t node = 0; node < space.node_count(); ++node) {
    for (double q : dpo.conditionals[node]) logits[node].push_back(std::log(q));
  }
  const auto policy_of = [&](const std::vector<std::vector<double>>& th) {
    std::vector<std::vector<double>> cond(th.size());
    for (std::size_t node = 0; node < th.size(); ++node) {
      const double lse = numerics::logsumexp(th[node]);
      for (double v : th[node]) cond[node].push_back(std::exp(v - lse));
    }
    return TabularPolicy::from_conditionals(space, std::move(cond));
  };
  const auto objective = [&](const TabularPolicy& p) {
    return twdpo_objective(space, p, inst.ref, inst.rewards, inst.beta, inst.weights);
  };

  OptimumReport out;
  out.policy = policy_of(logits);
  out.objective = objective(out.policy);
  double step = 1.0;
  for (out.iterations = 0; out.iterations < max_iterations; ++out.iterations) {
    const auto g = twdpo_objective_grad(space, out.policy, inst.ref, inst.rewards, inst.beta,
                                        inst.weights);
    double norm = 0.0;
    for (const auto& row : g) {
      for (double v : row) norm = std::max(norm, std::abs(v));
    }
    out.grad_norm = norm;
    if (norm < tol) {
      out.converged = true;
      break;
    }
    bool improved = false;
    while (step > 1e-12) {
      auto trial = logits;
      for (std::size_t node = 0; node < trial.size(); ++node) {
        for (std::size_t o = 0; o < trial[node].size(); ++o) trial[node][o] += step * g[node][o];
      }
      TabularPolicy p = policy_of(trial);
      const double j = objective(p);
      if (j > out.objective) {
        logits = std::move(trial);
        out.policy = std::move(p);
        out.objective = j;
        step *= 1.5;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) {
      break;
    }
  }
  out.kl_opt_dpo = kl_tv(out.policy.probs, dpo.probs).kl;
  out.C = std::max(max_abs_log_ratio(space, out.policy, inst.ref),
                   max_abs_log_ratio(space, dpo, inst.ref));
  out.bound_rhs = max_abs_epsilon(space, inst.weights) * out.C *
                  (dpo.expected_length(space) + out.policy.expected_length(space));
  out.lemma_holds = out.kl_opt_dpo <= out.bound_rhs + 1e-9;
  return out;
}

std::string to_text(const PerturbationReport& r) {
  std::string s;
  s += "delta = " + format_real(r.delta) + "\n";
  s += "C = " + format_real(r.C) + "\n";
  s += "expected_len_dpo = " + format_real(r.expected_len_dpo) + "\n";
  s += "expected_len_heuristic = " + format_real(r.expected_len_heuristic) + "\n";
  s += "kl_forward = " + format_real(r.kl_forward) + "\n";
  s += "kl_reverse = " + format_real(r.kl_reverse) + "\n";
  s += "tv = " + format_real(r.tv) + "\n";
  s += "bound_rhs = " + format_real(r.bound_rhs) + "\n";
  s += "identity_gap = " + format_real(r.identity_gap) + "\n";
  s += std::string("pinsker_ok = ") + (r.pinsker_ok ? "true" : "false") + "\n";
  s += std::string("satisfied = ") + (r.satisfied ? "true" : "false") + "\n";
  return s;
}

}  // namespace twdpo::theory
