// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "twdpo/tensor.hpp"
#include "twdpo/tiny_lm.hpp"

namespace twdpo::weights {

using lm::TokenId;
using lm::Tokens;

/// Token segments framing a pairwise judging prompt.
struct JudgeTemplate {
  Tokens preamble;
  Tokens question_header;
  Tokens response_a_header;
  Tokens response_b_header;
  Tokens instruction_suffix;
  TokenId identifier_a = 4;
  TokenId identifier_b = 5;

  /// Throws invalid_argument for equal identifiers, invalid_token for ids
  /// outside the vocabulary.
  void validate(std::size_t vocab_size) const;
  /// Fixed single-token headers on reserved ids 6..10, identifiers 4 and 5.
  static JudgeTemplate toy();
};

struct ExtractionConfig {
  /// 1-based layer index; 0 selects the last layer.
  std::size_t layer_index = 0;
  std::size_t sink_K = 1;
  std::size_t sink_min_len_Kprime = 5;
  bool use_rollout = false;
  /// Rescale matched weights to sum 1 after token matching.
  bool renormalize_matched = false;

  static constexpr std::size_t rounds = 2;

  void validate(std::size_t n_layers) const;
  std::size_t resolved_layer(std::size_t n_layers) const;
  void apply(const std::map<std::string, std::string>& values);
  std::string to_text() const;
};

struct TokenWeightVector {
  std::vector<double> weights;
  bool normalized = false;

  std::size_t size() const noexcept { return weights.size(); }
  double sum() const noexcept;
};

/// Half-open [start, end) token range.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - start; }
};

struct JudgePrompt {
  Tokens tokens;
  Span first;
  Span second;
};

struct JudgeRound {
  Tokens prompt_tokens;
  Span span_first;
  Span span_second;
  TokenId verdict = 0;
  std::vector<double> raw_first;
  std::vector<double> raw_second;
};

struct WeightPair {
  TokenWeightVector chosen;
  TokenWeightVector rejected;
};

/// Throws sequence_too_long with the required truncation when the assembled
/// prompt exceeds `max_seq_len`, invalid_argument for empty responses.
JudgePrompt build_judge_prompt(const JudgeTemplate& tpl, std::span<const TokenId> x,
                               std::span<const TokenId> first, std::span<const TokenId> second,
                               std::size_t max_seq_len);

/// Decodes the verdict, appends it, and reads the verdict position's attention
/// row (head mean at the configured layer, or the rollout row) at both spans.
JudgeRound extract_round(const lm::TinyTransformer& model, const ExtractionConfig& cfg,
                         const JudgeTemplate& tpl, const JudgePrompt& prompt);

/// Raw (pre-normalization) weights averaged over both response orders.
WeightPair extract_weights(const lm::TinyTransformer& model, const ExtractionConfig& cfg,
                           const JudgeTemplate& tpl, std::span<const TokenId> x,
                           std::span<const TokenId> y_w, std::span<const TokenId> y_l);

/// Throws degenerate_weights when no entry is positive.
TokenWeightVector normalize(const TokenWeightVector& v);

/// Resets the first K entries to 1/|v| and rescales the rest to fill the
/// remaining mass. Vectors shorter than K' pass through unchanged.
TokenWeightVector fix_attention_sink(const TokenWeightVector& v, std::size_t K, std::size_t Kprime);

TokenWeightVector uniform_weights(std::size_t n);

/// normalize then fix_attention_sink; degenerate input falls back to uniform
/// with a logged warning.
TokenWeightVector post_process(const TokenWeightVector& raw, const ExtractionConfig& cfg);

/// Head-averaged, identity-mixed (0.5/0.5), row-renormalized layer maps
/// multiplied from the first layer upward.
numerics::Tensor attention_rollout(const lm::AttentionRecord& rec);

struct MatchResult {
  TokenWeightVector weights;
  double match_fraction = 0.0;
  std::size_t matched = 0;
};

/// Transfers weights along a unit-cost edit-distance alignment. Target tokens
/// not aligned to an identical source token get weight 0.
MatchResult match_tokens(std::span<const TokenId> source_tokens, const TokenWeightVector& source,
                         std::span<const TokenId> target_tokens, bool renormalize = false);

enum class Role { chosen, rejected };
std::string to_string(Role role);
Role parse_role(const std::string& text);

struct WeightRecord {
  std::string example_id;
  Role role = Role::chosen;
  std::size_t n_tokens = 0;
  std::vector<double> weights;
  double match_fraction = 1.0;

  friend bool operator==(const WeightRecord&, const WeightRecord&) = default;
};

/// One JSON object per line; reals are written in shortest round-trip form.
void write_weight_file(const std::string& path, const std::vector<WeightRecord>& records);
/// Throws parse_error naming the line for malformed input.
std::vector<WeightRecord> read_weight_file(const std::string& path);
std::vector<WeightRecord> parse_weight_records(const std::string& text, const std::string& origin);

}  // namespace twdpo::weights
