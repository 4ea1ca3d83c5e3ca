// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "twdpo/tiny_lm.hpp"
#include "twdpo/weights.hpp"

namespace twdpo::trainer {

using lm::TokenId;
using lm::Tokens;
using weights::Span;
using weights::TokenWeightVector;

// Reserved ids of the synthetic vocabulary. 4..10 belong to the judge template.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kCopy = 11;
inline constexpr TokenId kReverse = 12;
inline constexpr TokenId kSort = 13;
inline constexpr TokenId kFirstContent = 16;

struct PreferenceExample {
  std::string example_id;
  Tokens prompt;
  Tokens chosen;
  Tokens rejected;
  std::optional<TokenWeightVector> weights_chosen;
  std::optional<TokenWeightVector> weights_rejected;
  /// Ground-truth decisive positions, shared by both responses.
  std::optional<Span> key_span;

  /// Throws invalid_argument for empty responses and weight_length_mismatch
  /// for weights that do not cover their response.
  void validate() const;
  bool has_weights() const { return weights_chosen.has_value() && weights_rejected.has_value(); }
};

struct SynthTaskSpec {
  std::size_t vocab_size = 64;
  std::size_t min_content = 4;
  std::size_t max_content = 8;
  std::size_t max_key_span = 3;
  /// Content ids are kFirstContent .. kFirstContent + content_tokens - 1.
  std::size_t content_tokens = 16;

  void validate() const;
};

struct Dataset {
  std::vector<PreferenceExample> train;
  std::vector<PreferenceExample> valid;
};

/// Prompts are BOS, a task token (copy, reverse or sort), content tokens and
/// SEP. The chosen response applies the task and ends with EOS; the rejected
/// response replaces a 1..max_key_span window of it with content tokens absent
/// from both the prompt and the replaced positions.
Dataset make_synth_dataset(std::uint64_t seed, std::size_t n_train, std::size_t n_valid,
                           const SynthTaskSpec& spec = {});

/// Half the mass spread uniformly, half on the key span.
weights::WeightPair oracle_weights(const PreferenceExample& ex);

/// One JSON object per line with example_id, prompt_tokens, chosen_tokens,
/// rejected_tokens and, when known, key_span.
void write_dataset(const std::string& path, const std::vector<PreferenceExample>& examples);
std::vector<PreferenceExample> read_dataset(const std::string& path);
std::vector<PreferenceExample> parse_dataset(const std::string& text, const std::string& origin);

/// Weight records for both roles of every example.
std::vector<weights::WeightRecord> weight_records(const std::vector<PreferenceExample>& examples);

/// Attaches weights by example id. Throws missing_weights listing every
/// example without both roles, weight_length_mismatch for wrong lengths.
void attach_weights(std::vector<PreferenceExample>& examples,
                    const std::vector<weights::WeightRecord>& records);
void attach_uniform_weights(std::vector<PreferenceExample>& examples);
void attach_oracle_weights(std::vector<PreferenceExample>& examples);
/// Post-processed two-round attention weights with `judge` as the judge.
void attach_extracted_weights(std::vector<PreferenceExample>& examples,
                              const lm::TinyTransformer& judge,
                              const weights::ExtractionConfig& cfg,
                              const weights::JudgeTemplate& tpl);

}  // namespace twdpo::trainer
