// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <random>

#include "support.hpp"
#include "twdpo/error.hpp"
#include "twdpo/kvtext.hpp"
#include "twdpo/tokenizer.hpp"
#include "twdpo/weights.hpp"

using namespace twdpo;
using namespace twdpo::weights;
using lm::ModelConfig;
using lm::NamedTensor;
using lm::TinyTransformer;
using numerics::Tensor;

namespace {

ModelConfig judge_config(std::size_t heads = 2) {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = heads;
  c.max_seq_len = 40;
  return c;
}

TinyTransformer spread_model(const ModelConfig& c, std::uint64_t seed) {
  TinyTransformer m(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.4);
  m.update([&](std::vector<NamedTensor>& ps) {
    for (auto& p : ps) {
      if (!p.name.ends_with(".gain")) {
        for (double& v : p.value.values()) v = n(rng);
      }
    }
  });
  return m;
}

void expect_vec(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= tol);
}

// Independent one-pass Levenshtein distance.
std::size_t edit_distance(const lm::Tokens& a, const lm::Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::vector<std::size_t> cur(b.size() + 1);
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    prev = cur;
  }
  return prev[b.size()];
}

}  // namespace

TEST_CASE("judge prompt layout") {
  const JudgeTemplate tpl = JudgeTemplate::toy();
  const lm::Tokens x{20, 21, 22};
  const lm::Tokens a{23, 24};
  const lm::Tokens b{25, 26, 27};
  const JudgePrompt p = build_judge_prompt(tpl, x, a, b, 64);
  const lm::Tokens want{6, 7, 20, 21, 22, 8, 23, 24, 9, 25, 26, 27, 10};
  CHECK(p.tokens == want);
  CHECK(lm::Tokens(p.tokens.begin() + p.first.start, p.tokens.begin() + p.first.end) == a);
  CHECK(lm::Tokens(p.tokens.begin() + p.second.start, p.tokens.begin() + p.second.end) == b);

  const JudgePrompt q = build_judge_prompt(tpl, x, b, a, 64);
  CHECK(q.tokens.size() == p.tokens.size());
  CHECK(lm::Tokens(q.tokens.begin() + q.first.start, q.tokens.begin() + q.first.end) == b);

  const JudgePrompt e = build_judge_prompt(tpl, {}, a, b, 64);
  const lm::Tokens want_empty{6, 7, 8, 23, 24, 9, 25, 26, 27, 10};
  CHECK(e.tokens == want_empty);
  CHECK(e.first.start == 3);
  CHECK(e.second.start == 6);

  try {
    build_judge_prompt(tpl, x, a, b, 10);
    FAIL("expected overlength");
  } catch (const Error& err) {
    CHECK(err.kind() == ErrorKind::sequence_too_long);
    CHECK(std::string(err.what()).find("truncate by 3") != std::string::npos);
  }
  CHECK_THROWS_AS(build_judge_prompt(tpl, x, {}, b, 64), Error);

  JudgeTemplate bad = tpl;
  bad.identifier_b = bad.identifier_a;
  CHECK_THROWS_AS(bad.validate(32), Error);
  CHECK_THROWS_AS(tpl.validate(8), Error);
}

TEST_CASE("extraction rounds read valid attention mass") {
  const TinyTransformer m = spread_model(judge_config(), 1);
  const JudgeTemplate tpl = JudgeTemplate::toy();
  const ExtractionConfig cfg;
  const lm::Tokens x{20, 21};
  const lm::Tokens yw{22, 23, 24, 25, 26};
  const lm::Tokens yl{27, 28, 29};
  const JudgeRound r = extract_round(m, cfg, tpl, build_judge_prompt(tpl, x, yw, yl, 40));
  CHECK((r.verdict == 4 || r.verdict == 5));
  CHECK(r.raw_first.size() == yw.size());
  CHECK(r.raw_second.size() == yl.size());
  double total = 0.0;
  for (double v : r.raw_first) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    total += v;
  }
  for (double v : r.raw_second) total += v;
  CHECK(total <= 1.0 + 1e-9);

  // The verdict row of the chosen layer, recomputed by hand.
  lm::Tokens full = r.prompt_tokens;
  full.push_back(r.verdict);
  const auto fwd = lm::forward_with_attention(m, full);
  const Tensor mean = fwd.attention.head_mean(2);
  for (std::size_t j = 0; j < yw.size(); ++j) {
    CHECK(r.raw_first[j] == mean.at(full.size() - 1, r.span_first.start + j));
  }

  const auto fits = build_judge_prompt(tpl, lm::Tokens(33, 20), lm::Tokens{22}, lm::Tokens{23}, 40);
  CHECK(fits.tokens.size() == 40);
  CHECK_THROWS_AS(extract_round(m, cfg, tpl, fits), Error);
}

TEST_CASE("single head average is the head itself") {
  const TinyTransformer m = spread_model(judge_config(1), 2);
  const JudgeTemplate tpl = JudgeTemplate::toy();
  ExtractionConfig cfg;
  cfg.layer_index = 1;
  const JudgePrompt p = build_judge_prompt(tpl, lm::Tokens{20}, lm::Tokens{21, 22}, lm::Tokens{23}, 40);
  const JudgeRound r = extract_round(m, cfg, tpl, p);
  lm::Tokens full = p.tokens;
  full.push_back(r.verdict);
  const auto fwd = lm::forward_with_attention(m, full);
  CHECK(r.raw_first[0] == fwd.attention.at(1, 1).at(full.size() - 1, p.first.start));
}

TEST_CASE("extract_weights averages both orders and is role symmetric") {
  const TinyTransformer m = spread_model(judge_config(), 3);
  const JudgeTemplate tpl = JudgeTemplate::toy();
  const ExtractionConfig cfg;
  const lm::Tokens x{20, 21, 22};
  const lm::Tokens yw{23, 24, 25, 26};
  const lm::Tokens yl{27, 28, 29, 30, 31, 20};
  const WeightPair a = extract_weights(m, cfg, tpl, x, yw, yl);
  const WeightPair b = extract_weights(m, cfg, tpl, x, yl, yw);
  CHECK(a.chosen.weights == b.rejected.weights);
  CHECK(a.rejected.weights == b.chosen.weights);
  CHECK_FALSE(a.chosen.normalized);

  const JudgeRound r1 = extract_round(m, cfg, tpl, build_judge_prompt(tpl, x, yw, yl, 40));
  const JudgeRound r2 = extract_round(m, cfg, tpl, build_judge_prompt(tpl, x, yl, yw, 40));
  for (std::size_t t = 0; t < yw.size(); ++t) {
    CHECK(a.chosen.weights[t] == doctest::Approx(0.5 * r1.raw_first[t] + 0.5 * r2.raw_second[t]));
  }
}

TEST_CASE("zeroed attention projections give uniform raw weights") {
  TinyTransformer m = spread_model(judge_config(), 4);
  m.update([](std::vector<NamedTensor>& ps) {
    for (auto& p : ps) {
      if (p.name.ends_with("attn.wq") || p.name.ends_with("attn.wk") ||
          p.name.ends_with("attn.bq") || p.name.ends_with("attn.bk")) {
        std::fill(p.value.values().begin(), p.value.values().end(), 0.0);
      }
    }
  });
  const JudgeTemplate tpl = JudgeTemplate::toy();
  const lm::Tokens x{20, 21};
  const lm::Tokens yw{22, 23, 24};
  const lm::Tokens yl{25, 26};
  const WeightPair w = extract_weights(m, ExtractionConfig{}, tpl, x, yw, yl);
  const std::size_t positions = build_judge_prompt(tpl, x, yw, yl, 40).tokens.size() + 1;
  for (double v : w.chosen.weights) CHECK(std::abs(v - 1.0 / static_cast<double>(positions)) < 1e-12);
  for (double v : w.rejected.weights) CHECK(std::abs(v - 1.0 / static_cast<double>(positions)) < 1e-12);
}

TEST_CASE("normalize examples") {
  expect_vec(normalize({{0.2, 0.3, 0.5}}).weights, {0.2, 0.3, 0.5}, 1e-15);
  expect_vec(normalize({{0.1, 0.1, 0.2}}).weights, {0.25, 0.25, 0.5}, 1e-15);
  CHECK(normalize({{3.5}}).weights == std::vector<double>{1.0});
  CHECK(normalize({{3.5}}).normalized);
  try {
    normalize({{0.0, 0.0}});
    FAIL("expected degenerate weights");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::degenerate_weights);
  }
}

TEST_CASE("attention sink fix examples") {
  const TokenWeightVector v{{0.5, 0.125, 0.125, 0.125, 0.125}, true};
  expect_vec(fix_attention_sink(v, 1, 5).weights, {0.2, 0.2, 0.2, 0.2, 0.2}, 1e-15);
  const TokenWeightVector short_v{{0.7, 0.1, 0.1, 0.1}, true};
  CHECK(fix_attention_sink(short_v, 1, 5).weights == short_v.weights);
  CHECK(fix_attention_sink(v, 0, 5).weights == v.weights);
  CHECK_THROWS_AS(fix_attention_sink({{1.0, 0, 0, 0, 0}, true}, 1, 5), Error);
}

TEST_CASE("post-processing invariants on random raw vectors") {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> len(5, 64);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const ExtractionConfig cfg;
  for (int trial = 0; trial < 500; ++trial) {
    TokenWeightVector raw;
    raw.weights.resize(len(rng));
    for (double& w : raw.weights) w = u(rng);
    const TokenWeightVector out = post_process(raw, cfg);
    CHECK(std::abs(out.sum() - 1.0) <= 1e-9);
    CHECK(out.weights[0] == 1.0 / static_cast<double>(raw.size()));
  }
  for (std::size_t n = 1; n <= 20; ++n) {
    const TokenWeightVector flat{std::vector<double>(n, 0.37), false};
    const TokenWeightVector out = post_process(flat, cfg);
    for (double w : out.weights) CHECK(w == doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-15));
  }
  const TokenWeightVector zeros{std::vector<double>(6, 0.0), false};
  CHECK(post_process(zeros, cfg).weights == uniform_weights(6).weights);
}

TEST_CASE("attention rollout") {
  lm::AttentionRecord eye(1, 2);
  Tensor id({4, 4});
  for (std::size_t i = 0; i < 4; ++i) id.at(i, i) = 1.0;
  eye.at(1, 1) = id;
  eye.at(1, 2) = id;
  CHECK(attention_rollout(eye) == id);

  const TinyTransformer m = spread_model(judge_config(), 5);
  const auto fwd = lm::forward_with_attention(m, lm::Tokens{1, 20, 21, 22, 23, 2, 24});
  const Tensor r = attention_rollout(fwd.attention);
  for (std::size_t i = 0; i < r.rows(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < r.cols(); ++j) {
      CHECK(r.at(i, j) >= 0.0);
      row += r.at(i, j);
    }
    CHECK(std::abs(row - 1.0) <= 1e-8);
  }

  // Identical layers: rollout equals the mixed matrix squared.
  lm::AttentionRecord same(2, 1);
  const Tensor& a = fwd.attention.at(1, 1);
  same.at(1, 1) = a;
  same.at(2, 1) = a;
  const std::size_t n = a.rows();
  Tensor mixed = a;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) mixed.at(i, j) = 0.5 * a.at(i, j) + (i == j ? 0.5 : 0.0);
  }
  const Tensor got = attention_rollout(same);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double want = 0.0;
      for (std::size_t k = 0; k < n; ++k) want += mixed.at(i, k) * mixed.at(k, j);
      CHECK(std::abs(got.at(i, j) - want) < 1e-12);
    }
  }

  ExtractionConfig cfg;
  cfg.use_rollout = true;
  const JudgeTemplate tpl = JudgeTemplate::toy();
  const auto w = extract_weights(m, cfg, tpl, lm::Tokens{20}, lm::Tokens{21, 22}, lm::Tokens{23});
  CHECK(w.chosen.size() == 2);
}

TEST_CASE("token matching") {
  const lm::Tokens src{5, 6, 7, 8, 9};
  const TokenWeightVector w{{0.1, 0.2, 0.3, 0.15, 0.25}, true};
  const MatchResult same = match_tokens(src, w, src);
  CHECK(same.weights.weights == w.weights);
  CHECK(same.match_fraction == 1.0);

  const lm::Tokens first_changed{50, 6, 7, 8, 9};
  const MatchResult sub = match_tokens(src, w, first_changed);
  expect_vec(sub.weights.weights, {0.0, 0.2, 0.3, 0.15, 0.25}, 0.0);
  CHECK(sub.match_fraction == doctest::Approx(0.8));

  const lm::Tokens inserted{5, 6, 40, 7, 8, 9};
  const MatchResult ins = match_tokens(src, w, inserted);
  expect_vec(ins.weights.weights, {0.1, 0.2, 0.0, 0.3, 0.15, 0.25}, 0.0);

  const MatchResult none = match_tokens(src, w, lm::Tokens{1, 2});
  CHECK(none.match_fraction == 0.0);
  CHECK(none.weights.sum() == 0.0);

  const MatchResult renorm = match_tokens(src, w, first_changed, true);
  CHECK(std::abs(renorm.weights.sum() - 1.0) < 1e-12);

  // Matched count agrees with an independent alignment bound.
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<lm::TokenId> tok(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    lm::Tokens a(8), b(9);
    for (auto& t : a) t = tok(rng);
    for (auto& t : b) t = tok(rng);
    const MatchResult r = match_tokens(a, uniform_weights(a.size()), b);
    const std::size_t d = edit_distance(a, b);
    // Every non-matched target position costs at least one edit.
    CHECK(b.size() - r.matched <= d);
    CHECK(r.matched <= std::min(a.size(), b.size()));
  }
}

TEST_CASE("re-tokenized responses mostly match") {
  const ByteTokenizer tok = ByteTokenizer::standard();
  const std::string response = "the station and the theory of reading is that the order matters";
  const std::string ctx_a = "Question: what is it? Answer:" + response + " end";
  const std::string ctx_b = "Prompt says th" + response + "ing.";
  const auto pa = tok.encode(ctx_a);
  const auto pb = tok.encode(ctx_b);
  const std::size_t sa = ctx_a.find(response);
  const std::size_t sb = ctx_b.find(response);
  const lm::Tokens ta = tokens_in_range(pa, sa, sa + response.size());
  const lm::Tokens tb = tokens_in_range(pb, sb, sb + response.size());
  const MatchResult r = match_tokens(ta, uniform_weights(ta.size()), tb);
  CHECK(r.match_fraction > 0.9);
  CHECK(r.match_fraction < 1.0);
  lm::Tokens whole;
  for (const auto& p : pa) whole.push_back(p.id);
  CHECK(tok.decode(whole) == ctx_a);
}

TEST_CASE("weight file round trip") {
  const auto dir = testing::scratch_dir("weights");
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len(1, 30);
  std::vector<WeightRecord> records;
  for (int i = 0; i < 100; ++i) {
    WeightRecord r;
    r.example_id = "ex-" + std::to_string(i);
    r.role = i % 2 == 0 ? Role::chosen : Role::rejected;
    r.weights.resize(len(rng));
    for (double& w : r.weights) w = u(rng) / 3.0;
    r.n_tokens = r.weights.size();
    r.match_fraction = u(rng);
    records.push_back(r);
  }
  const auto path = (dir / "w.jsonl").string();
  write_weight_file(path, records);
  const auto back = read_weight_file(path);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i] == records[i]);
    for (std::size_t t = 0; t < records[i].weights.size(); ++t) {
      CHECK(std::bit_cast<std::uint64_t>(back[i].weights[t]) ==
            std::bit_cast<std::uint64_t>(records[i].weights[t]));
    }
  }

  const auto empty = (dir / "empty.jsonl").string();
  write_weight_file(empty, {});
  CHECK(read_weight_file(empty).empty());

  std::string text = read_text_file(path);
  text.resize(text.size() - 20);
  try {
    parse_weight_records(text, "w.jsonl");
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::parse_error);
    CHECK(std::string(e.what()).find("line 100") != std::string::npos);
  }
}
