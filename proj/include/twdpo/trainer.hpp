// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "twdpo/dataset.hpp"
#include "twdpo/objectives.hpp"
#include "twdpo/tiny_lm.hpp"

namespace twdpo::trainer {

struct TrainConfig {
  double learning_rate = 3e-4;
  double beta = 5e-3;
  std::size_t batch_size = 8;
  std::size_t epochs = 3;
  double warmup_ratio = 0.1;
  std::uint64_t seed = 0;
  objectives::LossVariant variant = objectives::LossVariant::twdpo;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Decoupled decay, applied to matrices only.
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t validate_every = 250;

  void validate() const;
  std::size_t steps_per_epoch(std::size_t n_train) const;
  std::size_t total_steps(std::size_t n_train) const;
  std::size_t warmup_steps(std::size_t total) const;
  objectives::LossConfig loss() const { return {beta, variant}; }

  void apply(const std::map<std::string, std::string>& values);
  std::string to_text() const;
};

/// Linear warmup from 0 to the peak rate, then cosine decay to 0 at `total`.
double lr_at(std::size_t step, std::size_t total, const TrainConfig& cfg);

struct EvalResult {
  /// Strictly positive margins only; ties count as incorrect.
  double accuracy = 0.0;
  /// Same with ties counted as half correct.
  double accuracy_half_ties = 0.0;
  double mean_margin = 0.0;
  std::size_t n = 0;
};

/// Implicit-reward margins r'(y_w) - r'(y_l) under the configured variant.
std::vector<double> reward_margins(const lm::TinyTransformer& policy, const lm::TinyTransformer& ref,
                                   const std::vector<PreferenceExample>& data,
                                   const objectives::LossConfig& cfg);

EvalResult evaluate(const lm::TinyTransformer& policy, const lm::TinyTransformer& ref,
                    const std::vector<PreferenceExample>& data, const objectives::LossConfig& cfg);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct ValidationRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  EvalResult result;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  /// Evaluations at the validation cadence; the first is taken before training.
  std::vector<ValidationRecord> validations;
  /// One entry per epoch, taken at the end of the epoch.
  std::vector<EvalResult> epochs;
  EvalResult initial;
  std::size_t best_step = 0;
  double best_accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  lm::TinyTransformer model;
  lm::TinyTransformer best_model;
  TrainReport report;
};

/// Optimizes a trainable copy of `policy` against the frozen `ref`.
/// Throws missing_weights naming examples without weights (weighted
/// variants) and numeric_failure naming the step of a non-finite loss.
TrainResult train(const lm::TinyTransformer& policy, const lm::TinyTransformer& ref,
                  const Dataset& data, const TrainConfig& cfg);

/// Metric lines: one per step, validation and epoch, then a summary.
void write_train_report(const std::string& path, const TrainReport& report);

/// Norm of the part of the loss gradient contributed by key-span tokens of
/// both responses, at the given policy.
double key_span_gradient_norm(const lm::TinyTransformer& policy, const lm::TinyTransformer& ref,
                              const PreferenceExample& ex, const objectives::LossConfig& cfg);

struct JudgeTrainConfig {
  std::size_t epochs = 2;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

/// Fits a judge to emit the identifier of the chosen response after judge
/// prompts built in both response orders (cross-entropy on the verdict).
lm::TinyTransformer train_toy_judge(const lm::ModelConfig& config,
                                    const std::vector<PreferenceExample>& data,
                                    const weights::JudgeTemplate& tpl, const JudgeTrainConfig& jc);

/// Fraction of judge prompts (both orders) whose greedy verdict names the
/// chosen response.
double judge_accuracy(const lm::TinyTransformer& judge, const std::vector<PreferenceExample>& data,
                      const weights::JudgeTemplate& tpl);

/// The smallest desk-scale model: vocab 64, d_model 64, two layers, four heads.
lm::ModelConfig desk_model_config(std::uint64_t init_seed = 42);

}  // namespace twdpo::trainer
