// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "twdpo/dataset.hpp"
#include "twdpo/weights.hpp"

namespace twdpo::inspect {

/// Means over responses of one role.
struct RoleStats {
  /// Population standard deviation of the weights within a response.
  double std_dev = 0.0;
  double max = 0.0;
  double length = 0.0;
  std::size_t responses = 0;
};

struct TokenStat {
  lm::TokenId token = 0;
  /// Weight averaged over every occurrence of the token.
  double weight = 0.0;
  std::size_t count = 0;
};

struct WeightReport {
  RoleStats chosen;
  RoleStats rejected;
  std::vector<TokenStat> top_chosen;
  std::vector<TokenStat> top_rejected;
  std::size_t min_count = 0;
};

/// Joins records to examples by id. Throws join_error listing ids present on
/// one side only, weight_length_mismatch when a record does not cover its
/// response. Top tokens are ordered by weight, then by id.
WeightReport inspect_weights(const std::vector<weights::WeightRecord>& records,
                             const std::vector<trainer::PreferenceExample>& examples,
                             std::size_t min_count = 100, std::size_t top_n = 10);

/// Two plain-text tables: per-role Std/Max/Len, then top tokens per role.
std::string format_report(const WeightReport& report);
std::string to_json(const WeightReport& report);

}  // namespace twdpo::inspect
