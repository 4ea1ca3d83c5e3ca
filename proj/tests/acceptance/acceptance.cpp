// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "twdpo/cli.hpp"
#include "twdpo/dataset.hpp"
#include "twdpo/gradcheck.hpp"
#include "twdpo/kvtext.hpp"
#include "twdpo/objectives.hpp"
#include "twdpo/theory.hpp"
#include "twdpo/tokenizer.hpp"
#include "twdpo/trainer.hpp"
#include "twdpo/weights.hpp"

using namespace twdpo;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kReductionTol = 1e-12;
constexpr double kIdentityTol = 1e-12;
constexpr double kGradTol = 1e-5;
constexpr double kSinkSumTol = 1e-9;
constexpr double kKlIdentityTol = 1e-9;
constexpr double kZeroDeltaKl = 1e-10;
constexpr double kAccuracyThreshold = 0.8;
constexpr double kStatsTol = 1e-9;
constexpr double kMatchFraction = 0.95;
constexpr double kMatchShare = 0.90;

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;
  std::function<Verdict()> check;
};

std::string format(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

fs::path g_root;

std::string slurp(const fs::path& p) { return read_text_file(p.string()); }

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr) {
  args.insert(args.begin(), "twdpo");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (code != 0) std::cerr << err.str();
  return code;
}

// Results shared between the determinism criterion and the ones it reruns.
struct Reruns {
  bool judge_identical = false;
  bool extraction_identical = false;
  bool data_identical = false;
  bool training_identical = false;
  bool bounds_identical = false;
  bool inspect_identical = false;
} g_reruns;

std::vector<double> random_logprobs(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-8.0, -0.01);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

objectives::PairLogProbs random_pair(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(1, 40);
  const std::size_t lw = len(rng);
  const std::size_t ll = len(rng);
  return {random_logprobs(rng, lw), random_logprobs(rng, lw), random_logprobs(rng, ll),
          random_logprobs(rng, ll)};
}

weights::TokenWeightVector random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::exponential_distribution<double> e(1.0);
  weights::TokenWeightVector w;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += w.weights.emplace_back(e(rng) + 1e-3);
  for (double& x : w.weights) x /= s;
  w.normalized = true;
  return w;
}

Verdict uniform_reduction() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> beta(1e-3, 2.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const objectives::PairLogProbs p = random_pair(rng);
    const double b = beta(rng);
    const double tw = objectives::twdpo_loss(p, weights::uniform_weights(p.chosen_theta.size()),
                                             weights::uniform_weights(p.rejected_theta.size()), b);
    worst = std::max(worst, std::abs(tw - objectives::dpo_loss(p, b)));
  }
  return {worst <= kReductionTol, "max |twdpo - dpo| " + format("%.2e", worst) + " over 1000 pairs"};
}

Verdict identity_loss() {
  std::mt19937_64 rng(202);
  double worst = 0.0;
  for (int i = 0; i < 300; ++i) {
    objectives::PairLogProbs p = random_pair(rng);
    p.chosen_ref = p.chosen_theta;
    p.rejected_ref = p.rejected_theta;
    const auto aw = random_simplex(rng, p.chosen_theta.size());
    const auto al = random_simplex(rng, p.rejected_theta.size());
    for (auto v : {objectives::LossVariant::dpo, objectives::LossVariant::twdpo,
                   objectives::LossVariant::twdpo_lennorm}) {
      const objectives::LossConfig cfg{objectives::LossConfig::default_beta(v), v};
      worst = std::max(worst, std::abs(objectives::loss(p, aw, al, cfg) - std::numbers::ln2));
    }
  }
  return {worst <= kIdentityTol, "max |loss - ln 2| " + format("%.2e", worst) + " over 3 variants"};
}

Verdict gradient_agreement() {
  double worst = 0.0;
  std::size_t failures = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const double w = objectives::run_gradient_check(seed).worst();
    worst = std::max(worst, w);
    failures += w < kGradTol ? 0 : 1;
  }
  return {failures == 0, "worst pairwise relative error " + format("%.2e", worst) + ", " +
                             std::to_string(failures) + " of 100 above 1e-5"};
}

Verdict sink_invariants() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_k(1, 3);
  const std::size_t kprime = 5;
  std::uniform_int_distribution<std::size_t> long_len(kprime, 64);
  std::uniform_int_distribution<std::size_t> short_len(1, kprime - 1);
  double worst_sum = 0.0;
  bool heads_exact = true;
  bool short_unchanged = true;
  for (int i = 0; i < 500; ++i) {
    const std::size_t k = pick_k(rng);
    weights::TokenWeightVector raw;
    raw.weights.resize(long_len(rng));
    for (double& x : raw.weights) x = u(rng) * u(rng);
    raw.weights[0] += 5.0;
    const auto fixed = weights::fix_attention_sink(weights::normalize(raw), k, kprime);
    const double n = static_cast<double>(fixed.size());
    double s = 0.0;
    for (double x : fixed.weights) s += x;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    for (std::size_t t = 0; t < k; ++t) heads_exact = heads_exact && fixed.weights[t] == 1.0 / n;

    weights::TokenWeightVector small;
    small.weights.resize(short_len(rng));
    for (double& x : small.weights) x = u(rng);
    const auto passed = weights::fix_attention_sink(small, k, kprime);
    short_unchanged = short_unchanged && passed.weights == small.weights;
  }
  return {worst_sum <= kSinkSumTol && heads_exact && short_unchanged,
          "max |sum - 1| " + format("%.2e", worst_sum) + ", first K exact: " +
              (heads_exact ? "yes" : "no") + ", short inputs unchanged: " +
              (short_unchanged ? "yes" : "no")};
}

lm::ModelConfig judge_config(std::uint64_t seed) {
  lm::ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 64;
  c.init_seed = seed;
  return c;
}

Verdict swap_symmetry() {
  const trainer::Dataset d = trainer::make_synth_dataset(55, 50, 1);
  const weights::JudgeTemplate tpl = weights::JudgeTemplate::toy();
  trainer::JudgeTrainConfig jc;
  jc.epochs = 2;
  jc.seed = 5;
  const lm::TinyTransformer judge = trainer::train_toy_judge(judge_config(5), d.train, tpl, jc);
  const lm::TinyTransformer again = trainer::train_toy_judge(judge_config(5), d.train, tpl, jc);
  g_reruns.judge_identical = judge.checksum() == again.checksum();

  const weights::ExtractionConfig cfg;
  std::size_t symmetric = 0;
  bool reruns_equal = true;
  for (const auto& ex : d.train) {
    const auto fwd = weights::extract_weights(judge, cfg, tpl, ex.prompt, ex.chosen, ex.rejected);
    const auto rev = weights::extract_weights(judge, cfg, tpl, ex.prompt, ex.rejected, ex.chosen);
    symmetric += fwd.chosen.weights == rev.rejected.weights &&
                 fwd.rejected.weights == rev.chosen.weights;
    const auto rerun = weights::extract_weights(again, cfg, tpl, ex.prompt, ex.chosen, ex.rejected);
    reruns_equal = reruns_equal && rerun.chosen.weights == fwd.chosen.weights &&
                   rerun.rejected.weights == fwd.rejected.weights;
  }
  g_reruns.extraction_identical = reruns_equal;
  return {symmetric == d.train.size(),
          std::to_string(symmetric) + "/" + std::to_string(d.train.size()) +
              " examples bit-identical under response swap (judge verdict accuracy " +
              format("%.2f", trainer::judge_accuracy(judge, d.train, tpl)) + ")"};
}

Verdict bound_suite() {
  const theory::EnumSpace space(4, 4);
  std::size_t satisfied = 0;
  std::size_t pinsker = 0;
  double worst_gap = 0.0;
  double worst_zero_kl = 0.0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const theory::Instance inst = theory::random_instance(space, seed);
    const auto r = theory::check_bounds(space, inst.ref, inst.rewards, inst.beta, inst.weights);
    satisfied += r.satisfied ? 1 : 0;
    pinsker += r.pinsker_ok ? 1 : 0;
    worst_gap = std::max(worst_gap, r.identity_gap);

    const theory::Instance flat = theory::random_instance(space, seed, 0.0);
    const auto z = theory::check_bounds(space, flat.ref, flat.rewards, flat.beta, flat.weights);
    worst_zero_kl = std::max(worst_zero_kl, z.kl_forward);
  }
  std::string out;
  if (run_cli({"verify-bounds", "--instances", "50"}, &out) == 0) {
    std::string again;
    run_cli({"verify-bounds", "--instances", "50"}, &again);
    g_reruns.bounds_identical = out == again;
  }
  return {satisfied == 50 && pinsker == 50 && worst_gap <= kKlIdentityTol &&
              worst_zero_kl <= kZeroDeltaKl,
          std::to_string(satisfied) + "/50 satisfied, Pinsker " + std::to_string(pinsker) +
              "/50, identity gap " + format("%.1e", worst_gap) + ", zero-deviation KL " +
              format("%.1e", worst_zero_kl)};
}

std::vector<json> report_lines(const fs::path& p, const std::string& kind) {
  std::vector<json> out;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    json j = json::parse(line);
    if (j["kind"] == kind) out.push_back(j);
  }
  return out;
}

Verdict desk_training() {
  const fs::path data = g_root / "desk_data";
  const fs::path data2 = g_root / "desk_data_rerun";
  if (run_cli({"gen-data", "--out", data.string(), "--seed", "1"}) != 0 ||
      run_cli({"gen-data", "--out", data2.string(), "--seed", "1"}) != 0) {
    return {false, "gen-data failed"};
  }
  g_reruns.data_identical = true;
  for (const char* f : {"train.jsonl", "valid.jsonl", "oracle_weights.jsonl"}) {
    g_reruns.data_identical = g_reruns.data_identical && slurp(data / f) == slurp(data2 / f);
  }
  // Manifests name their own directory, so compare the recorded checksums only.
  const auto sums = [](const fs::path& dir) {
    std::vector<std::string> out;
    for (const auto& [path, sum] : json::parse(slurp(dir / "manifest.json"))["checksums"].items()) {
      out.push_back(sum);
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  g_reruns.data_identical = g_reruns.data_identical && sums(data) == sums(data2);

  const std::string weights = (data / "oracle_weights.jsonl").string();
  const fs::path run1 = g_root / "desk_train";
  const fs::path run2 = g_root / "desk_train_rerun";
  for (const fs::path& dir : {run1, run2}) {
    if (run_cli({"train", "--data", data.string(), "--weights", weights, "--out", dir.string()}) != 0) {
      return {false, "train failed"};
    }
  }
  g_reruns.training_identical = true;
  for (const char* f : {"reference.ckpt", "final.ckpt", "best.ckpt", "report.jsonl"}) {
    g_reruns.training_identical = g_reruns.training_identical && slurp(run1 / f) == slurp(run2 / f);
  }

  const lm::TinyTransformer ref = lm::load_checkpoint((run1 / "reference.ckpt").string());
  const auto summary = report_lines(run1 / "report.jsonl", "summary").at(0);
  const auto epochs = report_lines(run1 / "report.jsonl", "epoch");
  const double start = summary["initial"]["accuracy_half_ties"];
  std::vector<double> margins = {summary["initial"]["mean_margin"].get<double>()};
  std::string accs;
  for (const auto& e : epochs) {
    margins.push_back(e["mean_margin"]);
    accs += (accs.empty() ? "" : " ") + format("%.3f", e["accuracy"]);
  }
  bool increasing = true;
  for (std::size_t i = 1; i < margins.size(); ++i) increasing = increasing && margins[i] > margins[i - 1];
  const bool pass = ref.parameter_count() <= 100000 && ref.config().n_layers == 2 &&
                    ref.config().vocab_size == 64 && epochs.size() == 3 && start >= 0.4 &&
                    start <= 0.6 && epochs.back()["accuracy"].get<double>() >= kAccuracyThreshold &&
                    increasing;
  return {pass, std::to_string(ref.parameter_count()) + " parameters, start " +
                    format("%.2f", start) + " (ties half), epoch accuracy " + accs +
                    ", margins strictly increasing: " + (increasing ? "yes" : "no")};
}

struct Acc {
  double std_sum = 0.0, max_sum = 0.0, len_sum = 0.0, n = 0.0;
  std::map<long, std::pair<double, double>> tokens;
};

// One pass over the raw files, sharing no code with the library's report.
Verdict weight_statistics() {
  const fs::path data = g_root / "desk_data";
  if (!fs::exists(data / "train.jsonl")) return {false, "corpus from criterion 7 missing"};
  const fs::path report = g_root / "inspect.json";
  std::string table;
  const std::vector<std::string> args = {"inspect-weights", "--weights",
                                         (data / "oracle_weights.jsonl").string(), "--data",
                                         data.string(), "--out", report.string(), "--force"};
  if (run_cli(args, &table) != 0) return {false, "inspect-weights failed"};
  std::string table2;
  run_cli(args, &table2);
  g_reruns.inspect_identical = table == table2;

  std::map<std::string, json> examples;
  for (const char* f : {"train.jsonl", "valid.jsonl"}) {
    std::istringstream in(slurp(data / f));
    for (std::string line; std::getline(in, line);) {
      json j = json::parse(line);
      examples[j["example_id"]] = j;
    }
  }
  Acc acc[2];
  std::istringstream in(slurp(data / "oracle_weights.jsonl"));
  for (std::string line; std::getline(in, line);) {
    const json r = json::parse(line);
    const int role = r["role"] == "chosen" ? 0 : 1;
    const json& tokens = examples.at(r["example_id"])[role == 0 ? "chosen_tokens" : "rejected_tokens"];
    const std::vector<double> w = r["weights"];
    double mean = 0.0, mx = -1.0;
    for (double x : w) mean += x, mx = std::max(mx, x);
    mean /= static_cast<double>(w.size());
    double var = 0.0;
    for (double x : w) var += (x - mean) * (x - mean);
    Acc& a = acc[role];
    a.std_sum += std::sqrt(var / static_cast<double>(w.size()));
    a.max_sum += mx;
    a.len_sum += static_cast<double>(w.size());
    a.n += 1.0;
    for (std::size_t t = 0; t < w.size(); ++t) {
      auto& slot = a.tokens[tokens[t].get<long>()];
      slot.first += w[t];
      slot.second += 1.0;
    }
  }
  const json got = json::parse(slurp(report));
  double worst = 0.0;
  bool tops_match = true;
  std::size_t top_rows = 0;
  for (int role = 0; role < 2; ++role) {
    const std::string name = role == 0 ? "chosen" : "rejected";
    const Acc& a = acc[role];
    worst = std::max({worst, std::abs(got[name]["std"].get<double>() - a.std_sum / a.n),
                      std::abs(got[name]["max"].get<double>() - a.max_sum / a.n),
                      std::abs(got[name]["len"].get<double>() - a.len_sum / a.n)});
    std::vector<std::pair<double, long>> ranked;
    for (const auto& [tok, slot] : a.tokens) {
      if (slot.second >= 100) ranked.push_back({-slot.first / slot.second, tok});
    }
    std::sort(ranked.begin(), ranked.end());
    ranked.resize(std::min<std::size_t>(ranked.size(), 10));
    const json& top = got["top_" + name];
    tops_match = tops_match && top.size() == ranked.size();
    for (std::size_t i = 0; tops_match && i < ranked.size(); ++i) {
      tops_match = top[i]["token"].get<long>() == ranked[i].second;
      worst = std::max(worst, std::abs(top[i]["weight"].get<double>() + ranked[i].first));
    }
    top_rows += ranked.size();
  }
  const bool columns = table.find("Std") != std::string::npos &&
                       table.find("Max") != std::string::npos &&
                       table.find("Len") != std::string::npos &&
                       table.find("at least 100 occurrences") != std::string::npos;
  return {worst <= kStatsTol && tops_match && columns && top_rows > 0,
          "max deviation " + format("%.1e", worst) + " from recomputation, " +
              std::to_string(top_rows) + " top-token rows, token order " +
              (tops_match ? "matches" : "differs")};
}

Verdict token_matching() {
  static const std::vector<std::string> words = {
      "the", "station", "theory", "reading", "order", "matters", "weight", "token", "answer",
      "question", "within", "another", "context", "river", "stone", "bright", "notes", "interest",
      "tension", "retention", "others", "thin", "path", "record", "counter", "and", "of", "that",
      "is", "to", "in", "for", "with", "ending", "heading", "seating"};
  static const std::vector<std::string> prefixes = {
      "Question: ", "Q:", "The answer:", "Respond th", "  ", "In short, ", "Reply-", "x"};
  static const std::vector<std::string> suffixes = {"", " end", ".", "ing.", "s and more", "\n"};
  const ByteTokenizer tok = ByteTokenizer::standard();
  std::mt19937_64 rng(909);
  std::uniform_int_distribution<std::size_t> nwords(20, 40);
  std::uniform_int_distribution<std::size_t> pick_word(0, words.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_pre(0, prefixes.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_suf(0, suffixes.size() - 1);
  std::exponential_distribution<double> e(1.0);

  const std::size_t n_examples = 300;
  std::size_t good = 0;
  bool zeros_exact = true;
  double mean_fraction = 0.0;
  for (std::size_t i = 0; i < n_examples; ++i) {
    std::string response;
    const std::size_t n = nwords(rng);
    for (std::size_t w = 0; w < n; ++w) response += (w ? " " : "") + words[pick_word(rng)];
    const std::string a = prefixes[pick_pre(rng)] + response + suffixes[pick_suf(rng)];
    const std::string b = prefixes[pick_pre(rng)] + response + suffixes[pick_suf(rng)];
    const auto pa = tok.encode(a);
    const auto pb = tok.encode(b);
    const std::size_t sa = a.find(response);
    const std::size_t sb = b.find(response);
    const lm::Tokens ta = tokens_in_range(pa, sa, sa + response.size());
    const lm::Tokens tb = tokens_in_range(pb, sb, sb + response.size());
    weights::TokenWeightVector src;
    for (std::size_t t = 0; t < ta.size(); ++t) src.weights.push_back(e(rng) + 1e-3);
    const weights::MatchResult r = weights::match_tokens(ta, src, tb);
    good += r.match_fraction > kMatchFraction ? 1 : 0;
    mean_fraction += r.match_fraction;
    // Source weights are all positive, so zeros are exactly the unmatched slots.
    std::size_t zeros = 0;
    for (double w : r.weights.weights) zeros += w == 0.0 ? 1 : 0;
    zeros_exact = zeros_exact && r.weights.size() == tb.size() && zeros == tb.size() - r.matched;
  }
  const double share = static_cast<double>(good) / static_cast<double>(n_examples);
  return {share >= kMatchShare && zeros_exact,
          format("%.3f", share) + " of examples above 0.95 (mean fraction " +
              format("%.3f", mean_fraction / static_cast<double>(n_examples)) +
              "), unmatched weights exactly 0: " + (zeros_exact ? "yes" : "no")};
}

Verdict determinism() {
  const auto yn = [](bool b) { return b ? std::string("same") : std::string("DIFFERENT"); };
  const bool all = g_reruns.judge_identical && g_reruns.extraction_identical &&
                   g_reruns.data_identical && g_reruns.training_identical &&
                   g_reruns.bounds_identical && g_reruns.inspect_identical;
  return {all, "judge " + yn(g_reruns.judge_identical) + ", extraction " +
                   yn(g_reruns.extraction_identical) + ", corpus " + yn(g_reruns.data_identical) +
                   ", checkpoints+report " + yn(g_reruns.training_identical) + ", bounds " +
                   yn(g_reruns.bounds_identical) + ", inspect " + yn(g_reruns.inspect_identical)};
}

}  // namespace

int main() {
  setenv("TWDPO_LOG_LEVEL", "warn", 0);
  spdlog::set_level(spdlog::level::warn);
  g_root = fs::temp_directory_path() / "twdpo_acceptance";
  fs::remove_all(g_root);
  fs::create_directories(g_root);

  const std::vector<Criterion> criteria = {
      {1, "uniform-weight reduction", 1.0, uniform_reduction},
      {2, "identity loss", 1.0, identity_loss},
      {3, "gradient triple agreement", 120.0, gradient_agreement},
      {4, "weight-pipeline invariants", 1.0, sink_invariants},
      {5, "swap symmetry", 30.0, swap_symmetry},
      {6, "bound suite", 60.0, bound_suite},
      {7, "desk-scale training", 300.0, desk_training},
      {8, "weight statistics report", 10.0, weight_statistics},
      {9, "token matching", 10.0, token_matching},
      {10, "determinism", 0.0, determinism},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_seconds <= 0.0 || secs < c.budget_seconds;
    const bool pass = v.pass && in_time;
    failed += pass ? 0 : 1;
    std::string budget = c.budget_seconds > 0.0 ? " (limit " + format("%g", c.budget_seconds) + " s)" : "";
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << ": "
              << v.detail << "; " << format("%.2f", secs) << " s" << budget
              << (in_time ? "" : " OVER BUDGET") << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size()
            << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
