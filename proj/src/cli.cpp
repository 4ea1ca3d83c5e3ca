// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/cli.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "twdpo/dataset.hpp"
#include "twdpo/error.hpp"
#include "twdpo/gradcheck.hpp"
#include "twdpo/inspect.hpp"
#include "twdpo/kvtext.hpp"
#include "twdpo/theory.hpp"
#include "twdpo/tiny_lm.hpp"
#include "twdpo/trainer.hpp"
#include "twdpo/weights.hpp"

namespace twdpo::cli {

namespace fs = std::filesystem;

namespace {

/// Raised for command-line and configuration problems (exit 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::uint64_t seed = 0;
  std::string config_path;
  std::string out;
  bool force = false;
};

struct Settings {
  lm::ModelConfig model;
  trainer::TrainConfig train;
  weights::ExtractionConfig extraction;
};

std::set<std::string> keys_of(const std::string& text) {
  std::set<std::string> out;
  for (const auto& [k, v] : parse_key_values(text, "defaults")) out.insert(k);
  return out;
}

/// Defaults, then the config file, then the seed flag on every seed field.
Settings load_settings(const Common& c) {
  Settings s;
  if (!c.config_path.empty()) {
    const auto values = parse_key_values(read_text_file(c.config_path), c.config_path);
    std::set<std::string> known = keys_of(s.model.to_text());
    for (const auto& k : keys_of(s.train.to_text())) known.insert(k);
    for (const auto& k : keys_of(s.extraction.to_text())) known.insert(k);
    for (const auto& [k, v] : values) {
      if (!known.count(k)) {
        throw UsageError(c.config_path + ": unknown key '" + k + "'");
      }
    }
    s.model.apply(values);
    s.train.apply(values);
    s.extraction.apply(values);
  }
  s.model.init_seed = c.seed;
  s.train.seed = c.seed;
  s.model.validate();
  s.train.validate();
  s.extraction.validate(s.model.n_layers);
  return s;
}

std::map<std::string, std::string> config_map(const Settings& s) {
  std::map<std::string, std::string> out;
  for (const std::string& text : {s.model.to_text(), s.train.to_text(), s.extraction.to_text()}) {
    for (const auto& [k, v] : parse_key_values(text, "resolved")) out[k] = v;
  }
  return out;
}

void require_out(const Common& c) {
  if (c.out.empty()) {
    throw UsageError("--out is required");
  }
}

/// Refuses to replace existing outputs unless --force was given.
void guard_dir(const Common& c) {
  require_out(c);
  if (fs::exists(c.out)) {
    if (!fs::is_directory(c.out)) {
      throw UsageError(c.out + " exists and is not a directory");
    }
    if (!fs::is_empty(c.out) && !c.force) {
      throw UsageError(c.out + " is not empty; pass --force to overwrite");
    }
  }
  fs::create_directories(c.out);
}

void guard_file(const Common& c) {
  require_out(c);
  if (fs::exists(c.out) && !c.force) {
    throw UsageError(c.out + " exists; pass --force to overwrite");
  }
  const fs::path parent = fs::path(c.out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void add_input(RunManifest& m, const std::string& name, const std::string& path) {
  m.inputs[name] = path;
  m.checksums[path] = file_checksum(path);
}

void finish_outputs(RunManifest& m, const std::string& manifest_path) {
  for (const auto& [name, path] : m.outputs) m.checksums[path] = file_checksum(path);
  m.write(manifest_path);
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

/// A dataset file, or a directory whose train.jsonl and valid.jsonl are concatenated.
std::vector<trainer::PreferenceExample> load_examples(const std::string& path) {
  if (fs::is_directory(path)) {
    auto all = load_examples((fs::path(path) / "train.jsonl").string());
    auto valid = load_examples((fs::path(path) / "valid.jsonl").string());
    all.insert(all.end(), valid.begin(), valid.end());
    return all;
  }
  if (!fs::exists(path)) {
    throw UsageError("no such file: " + path);
  }
  return trainer::read_dataset(path);
}

void add_data_input(RunManifest& m, const std::string& path) {
  if (fs::is_directory(path)) {
    add_input(m, "train", (fs::path(path) / "train.jsonl").string());
    add_input(m, "valid", (fs::path(path) / "valid.jsonl").string());
  } else {
    add_input(m, "data", path);
  }
}

int gen_data(const Common& c, std::size_t n_train, std::size_t n_valid, std::ostream& out) {
  guard_dir(c);
  RunManifest m;
  m.command = "gen-data";
  m.seed = c.seed;
  m.config = {{"n_train", std::to_string(n_train)}, {"n_valid", std::to_string(n_valid)}};
  const fs::path dir(c.out);
  m.outputs = {{"train", (dir / "train.jsonl").string()},
               {"valid", (dir / "valid.jsonl").string()},
               {"oracle_weights", (dir / "oracle_weights.jsonl").string()}};
  const std::string manifest = (dir / "manifest.json").string();
  m.write(manifest);

  trainer::Dataset d = trainer::make_synth_dataset(c.seed, n_train, n_valid);
  trainer::write_dataset(m.outputs["train"], d.train);
  trainer::write_dataset(m.outputs["valid"], d.valid);
  trainer::attach_oracle_weights(d.train);
  trainer::attach_oracle_weights(d.valid);
  auto records = trainer::weight_records(d.train);
  const auto valid_records = trainer::weight_records(d.valid);
  records.insert(records.end(), valid_records.begin(), valid_records.end());
  weights::write_weight_file(m.outputs["oracle_weights"], records);
  finish_outputs(m, manifest);
  out << "wrote " << d.train.size() << " train and " << d.valid.size() << " valid pairs to "
      << c.out << "\n";
  return kExitOk;
}

int extract(const Common& c, const std::string& data_path, const std::string& judge_path,
            std::size_t judge_epochs, std::ostream& out) {
  const Settings s = load_settings(c);
  guard_file(c);
  RunManifest m;
  m.command = "extract-weights";
  m.seed = c.seed;
  m.config = config_map(s);
  m.config["judge_epochs"] = std::to_string(judge_epochs);
  add_data_input(m, data_path);
  if (!judge_path.empty()) add_input(m, "judge", judge_path);
  m.outputs["weights"] = c.out;
  const std::string manifest = c.out + ".manifest.json";
  m.write(manifest);

  auto examples = load_examples(data_path);
  const weights::JudgeTemplate tpl = weights::JudgeTemplate::toy();
  std::optional<lm::TinyTransformer> judge;
  if (!judge_path.empty()) {
    judge = lm::load_checkpoint(judge_path);
  } else if (judge_epochs > 0) {
    trainer::JudgeTrainConfig jc;
    jc.epochs = judge_epochs;
    jc.seed = c.seed;
    judge = trainer::train_toy_judge(s.model, examples, tpl, jc);
    out << "judge verdict accuracy " << fmt("%.4f", trainer::judge_accuracy(*judge, examples, tpl))
        << "\n";
  } else {
    judge = lm::TinyTransformer(s.model);
  }
  trainer::attach_extracted_weights(examples, *judge, s.extraction, tpl);
  weights::write_weight_file(c.out, trainer::weight_records(examples));
  finish_outputs(m, manifest);
  out << "wrote weights for " << examples.size() << " examples to " << c.out << "\n";
  return kExitOk;
}

/// Explicit file, then extraction from the reference, then uniform weights.
void resolve_weights(std::vector<trainer::PreferenceExample>& examples,
                     const std::vector<weights::WeightRecord>* records,
                     const lm::TinyTransformer* judge, const weights::ExtractionConfig& cfg) {
  if (records) {
    trainer::attach_weights(examples, *records);
    spdlog::info("weights: file ({} examples)", examples.size());
  } else if (judge) {
    trainer::attach_extracted_weights(examples, *judge, cfg, weights::JudgeTemplate::toy());
    spdlog::info("weights: extracted from the reference ({} examples)", examples.size());
  } else {
    trainer::attach_uniform_weights(examples);
    spdlog::info("weights: uniform fallback ({} examples)", examples.size());
  }
}

std::string eval_line(const std::string& label, const trainer::EvalResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %10.4f %12.6g %10.4f\n", label.c_str(), r.accuracy,
                r.mean_margin, r.accuracy_half_ties);
  return buf;
}

int train_cmd(const Common& c, const std::string& data_dir, const std::string& weights_path,
              bool extract_flag, const std::string& init_path, std::ostream& out) {
  const Settings s = load_settings(c);
  const fs::path data(data_dir);
  const std::string train_path = (data / "train.jsonl").string();
  const std::string valid_path = (data / "valid.jsonl").string();
  if (!fs::exists(train_path) || !fs::exists(valid_path)) {
    throw UsageError(data_dir + " must contain train.jsonl and valid.jsonl");
  }
  if (!weights_path.empty() && !fs::exists(weights_path)) {
    throw UsageError("no such file: " + weights_path);
  }
  guard_dir(c);
  RunManifest m;
  m.command = "train";
  m.seed = c.seed;
  m.config = config_map(s);
  m.config["weight_source"] =
      !weights_path.empty() ? "file" : (extract_flag ? "extraction" : "uniform");
  add_input(m, "train", train_path);
  add_input(m, "valid", valid_path);
  if (!weights_path.empty()) add_input(m, "weights", weights_path);
  if (!init_path.empty()) add_input(m, "init", init_path);
  const fs::path dir(c.out);
  m.outputs = {{"reference", (dir / "reference.ckpt").string()},
               {"final", (dir / "final.ckpt").string()},
               {"best", (dir / "best.ckpt").string()},
               {"report", (dir / "report.jsonl").string()}};
  const std::string manifest = (dir / "manifest.json").string();
  m.write(manifest);

  trainer::Dataset d{trainer::read_dataset(train_path), trainer::read_dataset(valid_path)};
  const lm::TinyTransformer ref =
      (init_path.empty() ? lm::TinyTransformer(s.model) : lm::load_checkpoint(init_path))
          .clone_frozen();
  if (s.train.variant != objectives::LossVariant::dpo) {
    std::optional<std::vector<weights::WeightRecord>> records;
    if (!weights_path.empty()) records = weights::read_weight_file(weights_path);
    for (auto* split : {&d.train, &d.valid}) {
      resolve_weights(*split, records ? &*records : nullptr, extract_flag ? &ref : nullptr,
                      s.extraction);
    }
  }

  const trainer::TrainResult r = trainer::train(ref, ref, d, s.train);
  lm::save_checkpoint(ref, m.outputs["reference"]);
  lm::save_checkpoint(r.model, m.outputs["final"]);
  lm::save_checkpoint(r.best_model, m.outputs["best"]);
  trainer::write_train_report(m.outputs["report"], r.report);
  finish_outputs(m, manifest);

  out << "epoch        accuracy       margin  acc(ties=1/2)\n";
  out << eval_line("start", r.report.initial);
  for (std::size_t e = 0; e < r.report.epochs.size(); ++e) {
    out << eval_line(std::to_string(e + 1), r.report.epochs[e]);
  }
  out << "best accuracy " << fmt("%.4f", r.report.best_accuracy) << " at step "
      << r.report.best_step << "; " << r.report.steps.size() << " steps in "
      << fmt("%.1f", r.report.wall_seconds) << " s\n";
  return kExitOk;
}

int eval_cmd(const Common& c, const std::string& policy_path, const std::string& ref_path,
             const std::string& data_path, const std::string& weights_path, std::ostream& out) {
  const Settings s = load_settings(c);
  if (!c.out.empty()) guard_file(c);
  RunManifest m;
  m.command = "eval";
  m.seed = c.seed;
  m.config = config_map(s);
  add_input(m, "policy", policy_path);
  add_input(m, "reference", ref_path);
  add_data_input(m, data_path);
  if (!weights_path.empty()) add_input(m, "weights", weights_path);
  if (!c.out.empty()) {
    m.outputs["report"] = c.out;
    m.write(c.out + ".manifest.json");
  }
  auto examples = load_examples(data_path);
  const lm::TinyTransformer policy = lm::load_checkpoint(policy_path);
  const lm::TinyTransformer ref = lm::load_checkpoint(ref_path);
  if (s.train.variant != objectives::LossVariant::dpo) {
    if (weights_path.empty()) {
      trainer::attach_uniform_weights(examples);
      spdlog::info("weights: uniform fallback ({} examples)", examples.size());
    } else {
      trainer::attach_weights(examples, weights::read_weight_file(weights_path));
    }
  }
  const trainer::EvalResult r = trainer::evaluate(policy, ref, examples, s.train.loss());
  out << "examples " << r.n << "\naccuracy " << fmt("%.6f", r.accuracy) << "\nmean_margin "
      << format_real(r.mean_margin) << "\n";
  if (!c.out.empty()) {
    nlohmann::ordered_json j;
    j["n"] = r.n;
    j["accuracy"] = r.accuracy;
    j["accuracy_half_ties"] = r.accuracy_half_ties;
    j["mean_margin"] = r.mean_margin;
    std::ofstream(c.out, std::ios::binary | std::ios::trunc) << j.dump() << "\n";
    finish_outputs(m, c.out + ".manifest.json");
  }
  return kExitOk;
}

int verify_grad(const Common& c, std::size_t instances, std::ostream& out) {
  if (!c.out.empty()) guard_file(c);
  RunManifest m;
  m.command = "verify-grad";
  m.seed = c.seed;
  m.config = {{"instances", std::to_string(instances)}, {"h", "1e-05"}, {"tolerance", "1e-05"}};
  if (!c.out.empty()) {
    m.outputs["records"] = c.out;
    m.write(c.out + ".manifest.json");
  }
  std::ofstream records;
  if (!c.out.empty()) records.open(c.out, std::ios::binary | std::ios::trunc);
  constexpr double kTol = 1e-5;
  bool ok = true;
  char line[160];
  std::snprintf(line, sizeof line, "%10s %16s %16s %16s %8s\n", "seed", "reverse/analytic",
                "reverse/finite", "analytic/finite", "status");
  out << line;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::uint64_t seed = c.seed + i;
    const objectives::GradCheckResult r = objectives::run_gradient_check(seed);
    const bool pass = r.worst() < kTol;
    ok = ok && pass;
    std::snprintf(line, sizeof line, "%10llu %16.3e %16.3e %16.3e %8s\n",
                  static_cast<unsigned long long>(seed), r.reverse_vs_analytic, r.reverse_vs_finite,
                  r.analytic_vs_finite, pass ? "ok" : "FAIL");
    out << line;
    if (records.is_open()) {
      nlohmann::ordered_json j;
      j["seed"] = seed;
      j["parameters"] = r.parameters;
      j["reverse_vs_analytic"] = r.reverse_vs_analytic;
      j["reverse_vs_finite"] = r.reverse_vs_finite;
      j["analytic_vs_finite"] = r.analytic_vs_finite;
      j["pass"] = pass;
      records << j.dump() << "\n";
    }
  }
  if (records.is_open()) {
    records.close();
    finish_outputs(m, c.out + ".manifest.json");
  }
  return ok ? kExitOk : kExitVerificationFailed;
}

int verify_bounds(const Common& c, std::size_t instances, std::size_t vocab, std::size_t max_len,
                  bool lemma, std::ostream& out) {
  const theory::EnumSpace space(vocab, max_len);
  if (!c.out.empty()) guard_file(c);
  RunManifest m;
  m.command = "verify-bounds";
  m.seed = c.seed;
  m.config = {{"instances", std::to_string(instances)},
              {"vocab", std::to_string(vocab)},
              {"max_len", std::to_string(max_len)},
              {"lemma", lemma ? "true" : "false"}};
  if (!c.out.empty()) {
    m.outputs["records"] = c.out;
    m.write(c.out + ".manifest.json");
  }
  std::ofstream records;
  if (!c.out.empty()) records.open(c.out, std::ios::binary | std::ios::trunc);
  std::size_t satisfied = 0;
  bool ok = true;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::uint64_t seed = c.seed + i + 1;
    const theory::Instance inst = theory::random_instance(space, seed);
    const theory::PerturbationReport r =
        theory::check_bounds(space, inst.ref, inst.rewards, inst.beta, inst.weights);
    const bool identity = r.identity_gap <= 1e-9;
    const bool pass = r.satisfied && r.pinsker_ok && identity;
    ok = ok && pass;
    satisfied += r.satisfied ? 1 : 0;
    char line[256];
    std::snprintf(line, sizeof line,
                  "instance %3zu seed %llu delta %.4f C %.4f kl %.3e bound %.3e tv %.3e "
                  "identity_gap %.1e %s%s%s\n",
                  i + 1, static_cast<unsigned long long>(seed), r.delta, r.C, r.kl_forward,
                  r.bound_rhs, r.tv, r.identity_gap, r.satisfied ? "satisfied" : "VIOLATED",
                  r.pinsker_ok ? "" : " pinsker-violated", identity ? "" : " identity-violated");
    out << line;
    nlohmann::ordered_json j;
    if (records.is_open()) {
      j["instance"] = i + 1;
      j["seed"] = seed;
      j["delta"] = r.delta;
      j["C"] = r.C;
      j["expected_len_dpo"] = r.expected_len_dpo;
      j["expected_len_heuristic"] = r.expected_len_heuristic;
      j["kl_forward"] = r.kl_forward;
      j["kl_reverse"] = r.kl_reverse;
      j["tv"] = r.tv;
      j["bound_rhs"] = r.bound_rhs;
      j["identity_gap"] = r.identity_gap;
      j["pinsker_ok"] = r.pinsker_ok;
      j["satisfied"] = r.satisfied;
    }
    if (lemma) {
      const theory::OptimumReport o = theory::approximate_optimum(space, inst);
      out << "  approximate optimum: kl " << fmt("%.3e", o.kl_opt_dpo) << " bound "
          << fmt("%.3e", o.bound_rhs) << (o.lemma_holds ? " holds" : " exceeds")
          << (o.converged ? "" : " (not converged)") << "\n";
      if (records.is_open()) {
        j["optimum_kl"] = o.kl_opt_dpo;
        j["optimum_bound"] = o.bound_rhs;
        j["optimum_converged"] = o.converged;
      }
    }
    if (records.is_open()) records << j.dump() << "\n";
  }
  out << satisfied << "/" << instances << " satisfied\n";
  if (records.is_open()) {
    records.close();
    finish_outputs(m, c.out + ".manifest.json");
  }
  return ok ? kExitOk : kExitVerificationFailed;
}

int inspect_cmd(const Common& c, const std::string& weights_path, const std::string& data_path,
                std::size_t min_count, std::size_t top_n, std::ostream& out) {
  if (!c.out.empty()) guard_file(c);
  RunManifest m;
  m.command = "inspect-weights";
  m.seed = c.seed;
  m.config = {{"min_count", std::to_string(min_count)}, {"top", std::to_string(top_n)}};
  if (!fs::exists(weights_path)) {
    throw UsageError("no such file: " + weights_path);
  }
  add_input(m, "weights", weights_path);
  add_data_input(m, data_path);
  if (!c.out.empty()) {
    m.outputs["report"] = c.out;
    m.write(c.out + ".manifest.json");
  }
  const inspect::WeightReport r = inspect::inspect_weights(
      weights::read_weight_file(weights_path), load_examples(data_path), min_count, top_n);
  out << inspect::format_report(r);
  if (!c.out.empty()) {
    std::ofstream(c.out, std::ios::binary | std::ios::trunc) << inspect::to_json(r) << "\n";
    finish_outputs(m, c.out + ".manifest.json");
  }
  return kExitOk;
}

}  // namespace

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["seed"] = seed;
  j["config"] = config;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["checksums"] = checksums;
  return j.dump(2);
}

void RunManifest::write(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << to_json() << "\n";
  if (!out) {
    throw Error(ErrorKind::io_error, "cannot write " + path);
  }
}

std::string file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorKind::io_error, "cannot read " + path);
  }
  std::uint64_t h = 14695981039346656037ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

void configure_logging() {
  auto logger = spdlog::get("twdpo");
  if (!logger) {
    logger = spdlog::stderr_logger_mt("twdpo");
  }
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("TWDPO_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "warn") spdlog::set_level(spdlog::level::warn);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else {
    spdlog::set_level(spdlog::level::info);
    if (level != "info") spdlog::warn("unknown TWDPO_LOG_LEVEL '{}', using info", level);
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  configure_logging();
  CLI::App app{"Token-weighted preference optimization laboratory", "twdpo"};
  app.require_subcommand(1, 1);
  Common c;
  const auto common = [&c](CLI::App* sub) {
    sub->add_option("--seed", c.seed, "Seed for every random choice");
    sub->add_option("--config", c.config_path, "Key-value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", c.out, "Output path");
    sub->add_flag("--force", c.force, "Overwrite existing outputs");
  };

  std::size_t n_train = 2000;
  std::size_t n_valid = 200;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic preference dataset");
  common(gen);
  gen->add_option("--n-train", n_train)->check(CLI::PositiveNumber);
  gen->add_option("--n-valid", n_valid)->check(CLI::PositiveNumber);

  std::string data_path;
  std::string judge_path;
  std::size_t judge_epochs = 0;
  auto* ext = app.add_subcommand("extract-weights", "Extract token weights with a judge model");
  common(ext);
  ext->add_option("--data", data_path, "Dataset file or generated directory")->required();
  ext->add_option("--judge", judge_path, "Judge checkpoint")->check(CLI::ExistingFile);
  ext->add_option("--judge-epochs", judge_epochs, "Fit a toy judge first");

  std::string weights_path;
  std::string init_path;
  bool extract_flag = false;
  auto* tr = app.add_subcommand("train", "Train a policy against a frozen reference");
  common(tr);
  tr->add_option("--data", data_path, "Directory with train.jsonl and valid.jsonl")->required();
  tr->add_option("--weights", weights_path, "Weight file");
  tr->add_flag("--extract", extract_flag, "Extract weights from the reference when no file is given");
  tr->add_option("--init", init_path, "Reference checkpoint")->check(CLI::ExistingFile);

  std::string policy_path;
  std::string ref_path;
  auto* ev = app.add_subcommand("eval", "Preference accuracy and reward margin");
  common(ev);
  ev->add_option("--policy", policy_path)->required()->check(CLI::ExistingFile);
  ev->add_option("--ref", ref_path)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_path, "Dataset file or generated directory")->required();
  ev->add_option("--weights", weights_path, "Weight file");

  std::size_t instances = 0;
  auto* vg = app.add_subcommand("verify-grad", "Compare reverse, analytic and finite gradients");
  common(vg);
  vg->add_option("--instances", instances, "Number of random instances")->default_val(5);

  std::size_t vocab = 4;
  std::size_t max_len = 4;
  bool lemma = false;
  auto* vb = app.add_subcommand("verify-bounds", "Check the perturbation bounds on enumerable spaces");
  common(vb);
  vb->add_option("--instances", instances, "Number of random instances")->default_val(50);
  vb->add_option("--vocab", vocab)->check(CLI::Range(1, 6));
  vb->add_option("--max-len", max_len)->check(CLI::Range(1, 5));
  vb->add_flag("--lemma", lemma, "Also report the approximate optimum comparison");

  std::size_t min_count = 100;
  std::size_t top_n = 10;
  auto* in = app.add_subcommand("inspect-weights", "Weight statistics per role and top tokens");
  common(in);
  in->add_option("--weights", weights_path)->required();
  in->add_option("--data", data_path, "Dataset file or generated directory")->required();
  in->add_option("--min-count", min_count);
  in->add_option("--top", top_n);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return gen_data(c, n_train, n_valid, out);
    if (ext->parsed()) return extract(c, data_path, judge_path, judge_epochs, out);
    if (tr->parsed()) return train_cmd(c, data_path, weights_path, extract_flag, init_path, out);
    if (ev->parsed()) return eval_cmd(c, policy_path, ref_path, data_path, weights_path, out);
    if (vg->parsed()) return verify_grad(c, instances, out);
    if (vb->parsed()) return verify_bounds(c, instances, vocab, max_len, lemma, out);
    if (in->parsed()) return inspect_cmd(c, weights_path, data_path, min_count, top_n, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::numeric_failure || e.kind() == ErrorKind::invalid_policy
               ? kExitVerificationFailed
               : kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace twdpo::cli
