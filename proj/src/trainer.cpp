// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "json.hpp"
#include "twdpo/error.hpp"
#include "twdpo/kvtext.hpp"
#include "twdpo/numerics.hpp"

namespace twdpo::trainer {

using lm::NamedTensor;
using lm::TinyTransformer;
using numerics::NodeId;
using numerics::Tensor;
using numerics::Trace;
using objectives::LossConfig;
using objectives::LossVariant;

namespace {

struct RefCache {
  std::vector<std::vector<double>> chosen;
  std::vector<std::vector<double>> rejected;
};

RefCache reference_logprobs(const TinyTransformer& ref, const std::vector<PreferenceExample>& data) {
  RefCache c;
  for (const PreferenceExample& ex : data) {
    c.chosen.push_back(lm::token_logprobs(ref, ex.prompt, ex.chosen));
    c.rejected.push_back(lm::token_logprobs(ref, ex.prompt, ex.rejected));
  }
  return c;
}

void require_weights(const std::vector<PreferenceExample>& data, const LossConfig& cfg) {
  if (cfg.variant == LossVariant::dpo) {
    return;
  }
  std::vector<std::string> missing;
  for (const PreferenceExample& ex : data) {
    if (!ex.has_weights()) missing.push_back(ex.example_id);
  }
  if (!missing.empty()) {
    std::string ids;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) ids += (i ? ", " : "") + missing[i];
    if (missing.size() > 20) ids += ", ... (" + std::to_string(missing.size()) + " total)";
    throw Error(ErrorKind::missing_weights,
                "variant " + objectives::to_string(cfg.variant) + " needs weights for " + ids);
  }
}

objectives::Coefficients example_coefficients(const PreferenceExample& ex, const LossConfig& cfg) {
  static const TokenWeightVector none;
  return objectives::coefficients(ex.chosen.size(), ex.rejected.size(),
                                  ex.weights_chosen ? *ex.weights_chosen : none,
                                  ex.weights_rejected ? *ex.weights_rejected : none, cfg,
                                  ex.example_id);
}

double weighted_diff(const std::vector<double>& c, const std::vector<double>& theta,
                     const std::vector<double>& ref) {
  double s = 0.0;
  for (std::size_t t = 0; t < c.size(); ++t) s += c[t] * (theta[t] - ref[t]);
  return s;
}

std::vector<double> margins_cached(const TinyTransformer& policy,
                                   const std::vector<PreferenceExample>& data,
                                   const RefCache& ref, const LossConfig& cfg) {
  std::vector<double> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const PreferenceExample& ex = data[i];
    const objectives::Coefficients c = example_coefficients(ex, cfg);
    const auto tw = lm::token_logprobs(policy, ex.prompt, ex.chosen);
    const auto tl = lm::token_logprobs(policy, ex.prompt, ex.rejected);
    out.push_back(weighted_diff(c.chosen, tw, ref.chosen[i]) -
                  weighted_diff(c.rejected, tl, ref.rejected[i]));
  }
  return out;
}

EvalResult summarize(const std::vector<double>& margins) {
  EvalResult r;
  r.n = margins.size();
  if (margins.empty()) {
    throw Error(ErrorKind::invalid_argument, "evaluation needs a non-empty dataset");
  }
  double correct = 0.0;
  double half = 0.0;
  double sum = 0.0;
  for (double m : margins) {
    correct += m > 0.0 ? 1.0 : 0.0;
    half += m > 0.0 ? 1.0 : (m == 0.0 ? 0.5 : 0.0);
    sum += m;
  }
  const double n = static_cast<double>(margins.size());
  r.accuracy = correct / n;
  r.accuracy_half_ties = half / n;
  r.mean_margin = sum / n;
  return r;
}

struct PairGradient {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

PairGradient pair_gradient(const TinyTransformer& policy, const PreferenceExample& ex,
                           const std::vector<double>& ref_w, const std::vector<double>& ref_l,
                           const objectives::Coefficients& coef) {
  Trace trace;
  const lm::BoundParameters bound = lm::bind_parameters(trace, policy, true);
  const auto& cfg = policy.config();
  const NodeId lw = lm::traced_token_logprobs(trace, bound, cfg, ex.prompt, ex.chosen);
  const NodeId ll = lm::traced_token_logprobs(trace, bound, cfg, ex.prompt, ex.rejected);
  const NodeId loss = objectives::traced_loss(trace, lw, ll, ref_w, ref_l, coef);
  return {trace.value(loss)[0], numerics::reverse_grad(trace, loss)};
}

class AdamW {
 public:
  AdamW(const TrainConfig& cfg, const std::vector<NamedTensor>& params) : cfg_(cfg) {
    for (const NamedTensor& p : params) {
      m_.push_back(Tensor::zeros_like(p.value));
      v_.push_back(Tensor::zeros_like(p.value));
    }
  }

  void step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = params[k].value;
      const double decay = p.rank() == 2 ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = grads[k][i];
        m_[k][i] = cfg_.adam_beta1 * m_[k][i] + (1.0 - cfg_.adam_beta1) * g;
        v_[k][i] = cfg_.adam_beta2 * v_[k][i] + (1.0 - cfg_.adam_beta2) * g * g;
        const double mhat = m_[k][i] / c1;
        const double vhat = v_[k][i] / c2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + decay * p[i]);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

nlohmann::ordered_json eval_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["accuracy_half_ties"] = r.accuracy_half_ties;
  j["mean_margin"] = r.mean_margin;
  j["n"] = r.n;
  return j;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorKind::invalid_argument, "learning_rate must be non-negative");
  }
  loss().validate();
  if (batch_size == 0 || epochs == 0 || validate_every == 0) {
    throw Error(ErrorKind::invalid_argument, "batch_size, epochs and validate_every must be positive");
  }
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
    throw Error(ErrorKind::invalid_argument, "warmup_ratio must lie in [0, 1)");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) ||
      !(adam_eps > 0.0) || !(weight_decay >= 0.0) || !(clip_norm > 0.0)) {
    throw Error(ErrorKind::invalid_argument, "optimizer settings out of range");
  }
}

std::size_t TrainConfig::steps_per_epoch(std::size_t n_train) const {
  return (n_train + batch_size - 1) / batch_size;
}

std::size_t TrainConfig::total_steps(std::size_t n_train) const {
  return epochs * steps_per_epoch(n_train);
}

std::size_t TrainConfig::warmup_steps(std::size_t total) const {
  return static_cast<std::size_t>(std::floor(warmup_ratio * static_cast<double>(total)));
}

void TrainConfig::apply(const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) {
    if (key == "learning_rate") learning_rate = parse_real(key, value);
    else if (key == "beta") beta = parse_real(key, value);
    else if (key == "batch_size") batch_size = parse_unsigned(key, value);
    else if (key == "epochs") epochs = parse_unsigned(key, value);
    else if (key == "warmup_ratio") warmup_ratio = parse_real(key, value);
    else if (key == "seed") seed = parse_unsigned(key, value);
    else if (key == "variant") variant = objectives::parse_variant(value);
    else if (key == "adam_beta1") adam_beta1 = parse_real(key, value);
    else if (key == "adam_beta2") adam_beta2 = parse_real(key, value);
    else if (key == "adam_eps") adam_eps = parse_real(key, value);
    else if (key == "weight_decay") weight_decay = parse_real(key, value);
    else if (key == "clip_norm") clip_norm = parse_real(key, value);
    else if (key == "validate_every") validate_every = parse_unsigned(key, value);
    else if (key == "schedule" && value != "cosine") {
      throw Error(ErrorKind::invalid_argument, "only the cosine schedule is available");
    } else if (key == "optimizer" && value != "adamw") {
      throw Error(ErrorKind::invalid_argument, "only the adamw optimizer is available");
    }
  }
}

std::string TrainConfig::to_text() const {
  std::string s;
  s += "learning_rate = " + format_real(learning_rate) + "\n";
  s += "beta = " + format_real(beta) + "\n";
  s += "batch_size = " + std::to_string(batch_size) + "\n";
  s += "epochs = " + std::to_string(epochs) + "\n";
  s += "warmup_ratio = " + format_real(warmup_ratio) + "\n";
  s += "schedule = cosine\n";
  s += "optimizer = adamw\n";
  s += "seed = " + std::to_string(seed) + "\n";
  s += "variant = " + objectives::to_string(variant) + "\n";
  s += "adam_beta1 = " + format_real(adam_beta1) + "\n";
  s += "adam_beta2 = " + format_real(adam_beta2) + "\n";
  s += "adam_eps = " + format_real(adam_eps) + "\n";
  s += "weight_decay = " + format_real(weight_decay) + "\n";
  s += "clip_norm = " + format_real(clip_norm) + "\n";
  s += "validate_every = " + std::to_string(validate_every) + "\n";
  return s;
}

double lr_at(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  if (total == 0 || step > total) {
    throw Error(ErrorKind::invalid_argument,
                "step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  const std::size_t warm = cfg.warmup_steps(total);
  if (step < warm) {
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warm);
  }
  if (step == total) {
    return 0.0;
  }
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<double> reward_margins(const TinyTransformer& policy, const TinyTransformer& ref,
                                   const std::vector<PreferenceExample>& data,
                                   const LossConfig& cfg) {
  cfg.validate();
  require_weights(data, cfg);
  return margins_cached(policy, data, reference_logprobs(ref, data), cfg);
}

EvalResult evaluate(const TinyTransformer& policy, const TinyTransformer& ref,
                    const std::vector<PreferenceExample>& data, const LossConfig& cfg) {
  return summarize(reward_margins(policy, ref, data, cfg));
}

TrainResult train(const TinyTransformer& policy, const TinyTransformer& ref, const Dataset& data,
                  const TrainConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const LossConfig loss_cfg = cfg.loss();
  if (data.train.empty() || data.valid.empty()) {
    throw Error(ErrorKind::invalid_argument, "training needs non-empty train and valid splits");
  }
  require_weights(data.train, loss_cfg);
  require_weights(data.valid, loss_cfg);
  for (const auto* split : {&data.train, &data.valid}) {
    for (const PreferenceExample& ex : *split) ex.validate();
  }

  const RefCache train_ref = reference_logprobs(ref, data.train);
  const RefCache valid_ref = reference_logprobs(ref, data.valid);
  std::vector<objectives::Coefficients> coefs;
  for (const PreferenceExample& ex : data.train) coefs.push_back(example_coefficients(ex, loss_cfg));

  TrainResult out{policy.clone_trainable(), policy.clone_trainable(), {}};
  TinyTransformer& model = out.model;
  TrainReport& report = out.report;
  AdamW opt(cfg, model.read().parameters());

  const std::size_t per_epoch = cfg.steps_per_epoch(data.train.size());
  const std::size_t total = cfg.total_steps(data.train.size());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.train.size());

  const auto validate_at = [&](std::size_t step, std::size_t epoch) {
    const EvalResult r = summarize(margins_cached(model, data.valid, valid_ref, loss_cfg));
    report.validations.push_back({step, epoch, r});
    spdlog::debug("step {} valid accuracy {:.4f} margin {:.6g}", step, r.accuracy, r.mean_margin);
    if (step == 0 || r.accuracy > report.best_accuracy) {
      report.best_accuracy = r.accuracy;
      report.best_step = step;
      out.best_model = model.clone_trainable();
    }
    return r;
  };

  std::size_t step = 0;
  // Step whose work is in progress; 0 is the evaluation before training.
  std::size_t failing_step = 0;
  try {
    report.initial = validate_at(0, 0);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t b = 0; b < per_epoch; ++b) {
        failing_step = step + 1;
        const std::size_t lo = b * cfg.batch_size;
        const std::size_t hi = std::min(lo + cfg.batch_size, order.size());
        std::vector<Tensor> grads;
        double batch_loss = 0.0;
        for (std::size_t k = lo; k < hi; ++k) {
          const std::size_t idx = order[k];
          PairGradient g = pair_gradient(model, data.train[idx], train_ref.chosen[idx],
                                         train_ref.rejected[idx], coefs[idx]);
          batch_loss += g.loss;
          if (grads.empty()) {
            grads = std::move(g.grads);
          } else {
            for (std::size_t p = 0; p < grads.size(); ++p) {
              for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += g.grads[p][i];
            }
          }
        }
        const double inv = 1.0 / static_cast<double>(hi - lo);
        batch_loss *= inv;
        if (!std::isfinite(batch_loss)) {
          throw Error(ErrorKind::numeric_failure, "non-finite batch loss");
        }
        double sq = 0.0;
        for (Tensor& g : grads) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] *= inv;
            sq += g[i] * g[i];
          }
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) {
          const double s = cfg.clip_norm / norm;
          for (Tensor& g : grads) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
          }
        }
        ++step;
        const double lr = lr_at(step, total, cfg);
        model.update([&](std::vector<NamedTensor>& ps) { opt.step(ps, grads, lr); });
        report.steps.push_back({step, lr, batch_loss, norm});
        if (step % cfg.validate_every == 0 && b + 1 != per_epoch) {
          validate_at(step, epoch);
        }
      }
      report.epochs.push_back(validate_at(step, epoch));
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::numeric_failure) {
      throw;
    }
    throw Error(ErrorKind::numeric_failure, "step " + std::to_string(failing_step) + ": " + e.what());
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

void write_train_report(const std::string& path, const TrainReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::io_error, "cannot write " + path);
  }
  for (const StepRecord& s : report.steps) {
    nlohmann::ordered_json j;
    j["kind"] = "step";
    j["step"] = s.step;
    j["lr"] = s.lr;
    j["loss"] = s.loss;
    j["grad_norm"] = s.grad_norm;
    out << j.dump() << '\n';
  }
  for (const ValidationRecord& v : report.validations) {
    nlohmann::ordered_json j = eval_json(v.result);
    j["kind"] = "validation";
    j["step"] = v.step;
    j["epoch"] = v.epoch;
    out << j.dump() << '\n';
  }
  for (std::size_t e = 0; e < report.epochs.size(); ++e) {
    nlohmann::ordered_json j = eval_json(report.epochs[e]);
    j["kind"] = "epoch";
    j["epoch"] = e + 1;
    out << j.dump() << '\n';
  }
  nlohmann::ordered_json s;
  s["kind"] = "summary";
  s["steps"] = report.steps.size();
  s["initial"] = eval_json(report.initial);
  s["final"] = report.epochs.empty() ? eval_json(report.initial) : eval_json(report.epochs.back());
  s["best_step"] = report.best_step;
  s["best_accuracy"] = report.best_accuracy;
  out << s.dump() << '\n';
  if (!out) {
    throw Error(ErrorKind::io_error, "write failed for " + path);
  }
}

double key_span_gradient_norm(const TinyTransformer& policy, const TinyTransformer& ref,
                              const PreferenceExample& ex, const LossConfig& cfg) {
  if (!ex.key_span) {
    throw Error(ErrorKind::invalid_argument, "example '" + ex.example_id + "' has no key span");
  }
  require_weights({ex}, cfg);
  const objectives::Coefficients full = example_coefficients(ex, cfg);
  const auto ref_w = lm::token_logprobs(ref, ex.prompt, ex.chosen);
  const auto ref_l = lm::token_logprobs(ref, ex.prompt, ex.rejected);
  const auto th_w = lm::token_logprobs(policy, ex.prompt, ex.chosen);
  const auto th_l = lm::token_logprobs(policy, ex.prompt, ex.rejected);
  const double z = weighted_diff(full.chosen, th_w, ref_w) - weighted_diff(full.rejected, th_l, ref_l);
  const double s = numerics::sigmoid(-z);

  // d loss = -s * (sum c_w dlogpi_w - sum c_l dlogpi_l); keep key-span terms.
  objectives::Coefficients key = full;
  for (auto* c : {&key.chosen, &key.rejected}) {
    for (std::size_t t = 0; t < c->size(); ++t) {
      if (t < ex.key_span->start || t >= ex.key_span->end) (*c)[t] = 0.0;
    }
  }
  Trace trace;
  const lm::BoundParameters bound = lm::bind_parameters(trace, policy, true);
  const NodeId lw = lm::traced_token_logprobs(trace, bound, policy.config(), ex.prompt, ex.chosen);
  const NodeId ll = lm::traced_token_logprobs(trace, bound, policy.config(), ex.prompt, ex.rejected);
  const NodeId part = trace.sub(trace.weighted_sum(lw, key.chosen), trace.weighted_sum(ll, key.rejected));
  double sq = 0.0;
  for (const Tensor& g : numerics::reverse_grad(trace, part, -s)) {
    for (double v : g.values()) sq += v * v;
  }
  return std::sqrt(sq);
}

namespace {

struct JudgeItem {
  Tokens prompt;
  TokenId target = 0;
};

std::vector<JudgeItem> judge_items(const std::vector<PreferenceExample>& data,
                                   const weights::JudgeTemplate& tpl, std::size_t max_len) {
  std::vector<JudgeItem> items;
  for (const PreferenceExample& ex : data) {
    // The verdict occupies one more position after the prompt.
    items.push_back({weights::build_judge_prompt(tpl, ex.prompt, ex.chosen, ex.rejected, max_len - 1)
                         .tokens,
                     tpl.identifier_a});
    items.push_back({weights::build_judge_prompt(tpl, ex.prompt, ex.rejected, ex.chosen, max_len - 1)
                         .tokens,
                     tpl.identifier_b});
  }
  return items;
}

}  // namespace

TinyTransformer train_toy_judge(const lm::ModelConfig& config,
                                const std::vector<PreferenceExample>& data,
                                const weights::JudgeTemplate& tpl, const JudgeTrainConfig& jc) {
  tpl.validate(config.vocab_size);
  TrainConfig opt_cfg;
  opt_cfg.learning_rate = jc.learning_rate;
  opt_cfg.batch_size = jc.batch_size;
  opt_cfg.epochs = jc.epochs;
  opt_cfg.seed = jc.seed;
  opt_cfg.validate();
  const std::vector<JudgeItem> items = judge_items(data, tpl, config.max_seq_len);
  if (items.empty()) {
    throw Error(ErrorKind::invalid_argument, "judge training needs examples");
  }
  TinyTransformer judge(config);
  AdamW opt(opt_cfg, judge.read().parameters());
  std::mt19937_64 rng(jc.seed);
  std::vector<std::size_t> order(items.size());
  const std::size_t total = opt_cfg.total_steps(items.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < jc.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t lo = 0; lo < order.size(); lo += jc.batch_size) {
      const std::size_t hi = std::min(lo + jc.batch_size, order.size());
      std::vector<Tensor> grads;
      for (std::size_t k = lo; k < hi; ++k) {
        const JudgeItem& item = items[order[k]];
        Trace trace;
        const lm::BoundParameters bound = lm::bind_parameters(trace, judge, true);
        const NodeId logits = lm::traced_logits(trace, bound, config, item.prompt);
        const std::size_t idx[] = {(item.prompt.size() - 1) * config.vocab_size + item.target};
        const NodeId nll = trace.scale(trace.pick(trace.log_softmax_rows(logits), idx), -1.0);
        auto g = numerics::reverse_grad(trace, nll, 1.0 / static_cast<double>(hi - lo));
        if (grads.empty()) {
          grads = std::move(g);
        } else {
          for (std::size_t p = 0; p < grads.size(); ++p) {
            for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += g[p][i];
          }
        }
      }
      ++step;
      const double lr = lr_at(step, total, opt_cfg);
      judge.update([&](std::vector<NamedTensor>& ps) { opt.step(ps, grads, lr); });
    }
  }
  return judge;
}

double judge_accuracy(const TinyTransformer& judge, const std::vector<PreferenceExample>& data,
                      const weights::JudgeTemplate& tpl) {
  const std::vector<JudgeItem> items = judge_items(data, tpl, judge.config().max_seq_len);
  if (items.empty()) {
    throw Error(ErrorKind::invalid_argument, "judge accuracy needs examples");
  }
  const TokenId ids[] = {tpl.identifier_a, tpl.identifier_b};
  std::size_t right = 0;
  for (const JudgeItem& item : items) {
    right += lm::greedy_verdict(judge, item.prompt, ids) == item.target ? 1 : 0;
  }
  return static_cast<double>(right) / static_cast<double>(items.size());
}

lm::ModelConfig desk_model_config(std::uint64_t init_seed) {
  lm::ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.max_seq_len = 64;
  c.mlp_ratio = 2;
  c.init_seed = init_seed;
  return c;
}

}  // namespace twdpo::trainer
