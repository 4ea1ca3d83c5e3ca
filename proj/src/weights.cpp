// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/weights.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "twdpo/error.hpp"
#include "twdpo/kvtext.hpp"

namespace twdpo::weights {

using numerics::Tensor;

namespace {

void check_ids(const Tokens& segment, std::size_t vocab_size) {
  for (TokenId id : segment) {
    if (id >= vocab_size) {
      throw Error(ErrorKind::invalid_token,
                  "judge template token " + std::to_string(id) + " is outside the vocabulary");
    }
  }
}

std::vector<double> slice(const Tensor& m, std::size_t row, Span span) {
  std::vector<double> out(span.size());
  for (std::size_t j = 0; j < span.size(); ++j) {
    out[j] = m.at(row, span.start + j);
  }
  return out;
}

std::vector<double> average(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = 0.5 * a[i] + 0.5 * b[i];
  }
  return out;
}

}  // namespace

void JudgeTemplate::validate(std::size_t vocab_size) const {
  if (identifier_a == identifier_b) {
    throw Error(ErrorKind::invalid_argument, "judge identifiers must differ");
  }
  for (const Tokens* seg : {&preamble, &question_header, &response_a_header, &response_b_header,
                            &instruction_suffix}) {
    check_ids(*seg, vocab_size);
  }
  check_ids({identifier_a, identifier_b}, vocab_size);
}

JudgeTemplate JudgeTemplate::toy() {
  JudgeTemplate t;
  t.preamble = {6};
  t.question_header = {7};
  t.response_a_header = {8};
  t.response_b_header = {9};
  t.instruction_suffix = {10};
  t.identifier_a = 4;
  t.identifier_b = 5;
  return t;
}

void ExtractionConfig::validate(std::size_t n_layers) const {
  if (layer_index > n_layers) {
    throw Error(ErrorKind::invalid_argument, "layer_index exceeds the number of layers");
  }
  if (sink_min_len_Kprime == 0 || sink_K >= sink_min_len_Kprime) {
    throw Error(ErrorKind::invalid_argument, "sink_K must be smaller than sink_min_len_Kprime");
  }
}

std::size_t ExtractionConfig::resolved_layer(std::size_t n_layers) const {
  return layer_index == 0 ? n_layers : layer_index;
}

void ExtractionConfig::apply(const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) {
    if (key == "layer_index") {
      layer_index = parse_unsigned(key, value);
    } else if (key == "sink_K") {
      sink_K = parse_unsigned(key, value);
    } else if (key == "sink_min_len_Kprime") {
      sink_min_len_Kprime = parse_unsigned(key, value);
    } else if (key == "use_rollout") {
      use_rollout = parse_bool(key, value);
    } else if (key == "renormalize_matched") {
      renormalize_matched = parse_bool(key, value);
    }
  }
}

std::string ExtractionConfig::to_text() const {
  std::string out;
  out += "layer_index = " + std::to_string(layer_index) + "\n";
  out += "sink_K = " + std::to_string(sink_K) + "\n";
  out += "sink_min_len_Kprime = " + std::to_string(sink_min_len_Kprime) + "\n";
  out += std::string("use_rollout = ") + (use_rollout ? "true" : "false") + "\n";
  out += std::string("renormalize_matched = ") + (renormalize_matched ? "true" : "false") + "\n";
  return out;
}

double TokenWeightVector::sum() const noexcept {
  return std::accumulate(weights.begin(), weights.end(), 0.0);
}

JudgePrompt build_judge_prompt(const JudgeTemplate& tpl, std::span<const TokenId> x,
                               std::span<const TokenId> first, std::span<const TokenId> second,
                               std::size_t max_seq_len) {
  if (first.empty() || second.empty()) {
    throw Error(ErrorKind::invalid_argument, "judged responses must be non-empty");
  }
  JudgePrompt out;
  Tokens& p = out.tokens;
  const auto put = [&p](auto seg) { p.insert(p.end(), seg.begin(), seg.end()); };
  put(tpl.preamble);
  put(tpl.question_header);
  put(x);
  put(tpl.response_a_header);
  out.first = {p.size(), p.size() + first.size()};
  put(first);
  put(tpl.response_b_header);
  out.second = {p.size(), p.size() + second.size()};
  put(second);
  put(tpl.instruction_suffix);
  if (p.size() > max_seq_len) {
    throw Error(ErrorKind::sequence_too_long,
                "judge prompt has " + std::to_string(p.size()) + " tokens; truncate by " +
                    std::to_string(p.size() - max_seq_len));
  }
  return out;
}

JudgeRound extract_round(const lm::TinyTransformer& model, const ExtractionConfig& cfg,
                         const JudgeTemplate& tpl, const JudgePrompt& prompt) {
  const lm::ModelConfig& mc = model.config();
  cfg.validate(mc.n_layers);
  if (prompt.tokens.size() + 1 > mc.max_seq_len) {
    throw Error(ErrorKind::sequence_too_long,
                "judge prompt plus verdict needs " + std::to_string(prompt.tokens.size() + 1) +
                    " positions; truncate by " +
                    std::to_string(prompt.tokens.size() + 1 - mc.max_seq_len));
  }
  JudgeRound round;
  round.prompt_tokens = prompt.tokens;
  round.span_first = prompt.first;
  round.span_second = prompt.second;
  const TokenId ids[] = {tpl.identifier_a, tpl.identifier_b};
  round.verdict = lm::greedy_verdict(model, prompt.tokens, ids);

  Tokens with_verdict = prompt.tokens;
  with_verdict.push_back(round.verdict);
  const lm::ForwardResult fwd = lm::forward_with_attention(model, with_verdict);
  const Tensor map = cfg.use_rollout ? attention_rollout(fwd.attention)
                                     : fwd.attention.head_mean(cfg.resolved_layer(mc.n_layers));
  const std::size_t row = with_verdict.size() - 1;
  round.raw_first = slice(map, row, prompt.first);
  round.raw_second = slice(map, row, prompt.second);
  return round;
}

WeightPair extract_weights(const lm::TinyTransformer& model, const ExtractionConfig& cfg,
                           const JudgeTemplate& tpl, std::span<const TokenId> x,
                           std::span<const TokenId> y_w, std::span<const TokenId> y_l) {
  const std::size_t max_len = model.config().max_seq_len;
  const JudgeRound r1 = extract_round(model, cfg, tpl, build_judge_prompt(tpl, x, y_w, y_l, max_len));
  const JudgeRound r2 = extract_round(model, cfg, tpl, build_judge_prompt(tpl, x, y_l, y_w, max_len));
  WeightPair out;
  out.chosen.weights = average(r1.raw_first, r2.raw_second);
  out.rejected.weights = average(r1.raw_second, r2.raw_first);
  return out;
}

TokenWeightVector normalize(const TokenWeightVector& v) {
  const double s = v.sum();
  if (!(s > 0.0)) {
    throw Error(ErrorKind::degenerate_weights, "weight vector has no positive entry");
  }
  TokenWeightVector out;
  out.weights.reserve(v.size());
  for (double w : v.weights) {
    out.weights.push_back(w / s);
  }
  out.normalized = true;
  return out;
}

TokenWeightVector fix_attention_sink(const TokenWeightVector& v, std::size_t K, std::size_t Kprime) {
  const std::size_t n = v.size();
  if (K == 0 || n < Kprime) {
    return v;
  }
  const std::size_t k = std::min(K, n);
  double rest = 0.0;
  for (std::size_t i = k; i < n; ++i) {
    rest += v.weights[i];
  }
  if (k < n && !(rest > 0.0)) {
    throw Error(ErrorKind::degenerate_weights, "no weight left after the sink tokens");
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const double scale = k < n ? (1.0 - static_cast<double>(k) * inv_n) / rest : 0.0;
  TokenWeightVector out = v;
  for (std::size_t i = 0; i < k; ++i) {
    out.weights[i] = inv_n;
  }
  for (std::size_t i = k; i < n; ++i) {
    out.weights[i] = v.weights[i] * scale;
  }
  return out;
}

TokenWeightVector uniform_weights(std::size_t n) {
  TokenWeightVector out;
  out.weights.assign(n, 1.0 / static_cast<double>(n));
  out.normalized = true;
  return out;
}

TokenWeightVector post_process(const TokenWeightVector& raw, const ExtractionConfig& cfg) {
  try {
    return fix_attention_sink(normalize(raw), cfg.sink_K, cfg.sink_min_len_Kprime);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::degenerate_weights) {
      throw;
    }
    spdlog::warn("degenerate weights over {} tokens, using uniform: {}", raw.size(), e.what());
    return uniform_weights(raw.size());
  }
}

Tensor attention_rollout(const lm::AttentionRecord& rec) {
  const std::size_t n = rec.length();
  Tensor result;
  for (std::size_t layer = 1; layer <= rec.n_layers(); ++layer) {
    Tensor a = rec.head_mean(layer);
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        a.at(i, j) = 0.5 * a.at(i, j) + (i == j ? 0.5 : 0.0);
        row += a.at(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) {
        a.at(i, j) /= row;
      }
    }
    if (layer == 1) {
      result = std::move(a);
      continue;
    }
    Tensor next({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        const double aik = a.at(i, k);
        for (std::size_t j = 0; j < n; ++j) {
          next.at(i, j) += aik * result.at(k, j);
        }
      }
    }
    result = std::move(next);
  }
  return result;
}

MatchResult match_tokens(std::span<const TokenId> source_tokens, const TokenWeightVector& source,
                         std::span<const TokenId> target_tokens, bool renormalize) {
  if (source_tokens.size() != source.size()) {
    throw Error(ErrorKind::weight_length_mismatch, "source weights do not match source tokens");
  }
  const std::size_t m = source_tokens.size();
  const std::size_t n = target_tokens.size();
  std::vector<std::size_t> dist((m + 1) * (n + 1));
  const auto d = [&](std::size_t i, std::size_t j) -> std::size_t& { return dist[i * (n + 1) + j]; };
  for (std::size_t i = 0; i <= m; ++i) d(i, 0) = i;
  for (std::size_t j = 0; j <= n; ++j) d(0, j) = j;
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      const std::size_t sub = d(i - 1, j - 1) + (source_tokens[i - 1] == target_tokens[j - 1] ? 0 : 1);
      d(i, j) = std::min({sub, d(i - 1, j) + 1, d(i, j - 1) + 1});
    }
  }

  MatchResult out;
  out.weights.weights.assign(n, 0.0);
  std::size_t i = m;
  std::size_t j = n;
  while (i > 0 && j > 0) {
    const bool same = source_tokens[i - 1] == target_tokens[j - 1];
    if (d(i, j) == d(i - 1, j - 1) + (same ? 0 : 1)) {
      if (same) {
        out.weights.weights[j - 1] = source.weights[i - 1];
        ++out.matched;
      }
      --i;
      --j;
    } else if (d(i, j) == d(i - 1, j) + 1) {
      --i;
    } else {
      --j;
    }
  }
  out.match_fraction = n == 0 ? 0.0 : static_cast<double>(out.matched) / static_cast<double>(n);
  if (renormalize && out.matched > 0 && out.weights.sum() > 0.0) {
    out.weights = normalize(out.weights);
  }
  return out;
}

std::string to_string(Role role) { return role == Role::chosen ? "chosen" : "rejected"; }

Role parse_role(const std::string& text) {
  if (text == "chosen") {
    return Role::chosen;
  }
  if (text == "rejected") {
    return Role::rejected;
  }
  throw Error(ErrorKind::parse_error, "unknown role '" + text + "'");
}

void write_weight_file(const std::string& path, const std::vector<WeightRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::io_error, "cannot write " + path);
  }
  for (const WeightRecord& r : records) {
    nlohmann::ordered_json j;
    j["example_id"] = r.example_id;
    j["role"] = to_string(r.role);
    j["n_tokens"] = r.n_tokens;
    j["weights"] = r.weights;
    j["match_fraction"] = r.match_fraction;
    out << j.dump() << '\n';
  }
  if (!out) {
    throw Error(ErrorKind::io_error, "write failed for " + path);
  }
}

std::vector<WeightRecord> parse_weight_records(const std::string& text, const std::string& origin) {
  std::vector<WeightRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    const std::string where = origin + " line " + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      WeightRecord r;
      r.example_id = j.at("example_id").get<std::string>();
      r.role = parse_role(j.at("role").get<std::string>());
      r.n_tokens = j.at("n_tokens").get<std::size_t>();
      r.weights = j.at("weights").get<std::vector<double>>();
      r.match_fraction = j.value("match_fraction", 1.0);
      if (r.weights.size() != r.n_tokens) {
        throw Error(ErrorKind::parse_error, "n_tokens does not match the weight count");
      }
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse_error, where + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::parse_error, where + ": " + e.what());
    }
  }
  return out;
}

std::vector<WeightRecord> read_weight_file(const std::string& path) {
  return parse_weight_records(read_text_file(path), path);
}

}  // namespace twdpo::weights
