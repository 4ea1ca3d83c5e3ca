// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/inspect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "json.hpp"
#include "twdpo/error.hpp"

namespace twdpo::inspect {

using weights::Role;
using weights::WeightRecord;

namespace {

struct Accum {
  double std_sum = 0.0;
  double max_sum = 0.0;
  double len_sum = 0.0;
  std::size_t n = 0;
  std::map<lm::TokenId, std::pair<double, std::size_t>> tokens;
};

void add(Accum& a, const std::vector<double>& w, const lm::Tokens& tokens) {
  const double n = static_cast<double>(w.size());
  double mean = 0.0;
  for (double v : w) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : w) var += (v - mean) * (v - mean);
  a.std_sum += std::sqrt(var / n);
  a.max_sum += *std::max_element(w.begin(), w.end());
  a.len_sum += n;
  ++a.n;
  for (std::size_t t = 0; t < w.size(); ++t) {
    auto& slot = a.tokens[tokens[t]];
    slot.first += w[t];
    ++slot.second;
  }
}

RoleStats finish(const Accum& a) {
  RoleStats s;
  s.responses = a.n;
  if (a.n > 0) {
    const double n = static_cast<double>(a.n);
    s.std_dev = a.std_sum / n;
    s.max = a.max_sum / n;
    s.length = a.len_sum / n;
  }
  return s;
}

std::vector<TokenStat> top(const Accum& a, std::size_t min_count, std::size_t top_n) {
  std::vector<TokenStat> out;
  for (const auto& [tok, slot] : a.tokens) {
    if (slot.second >= min_count) {
      out.push_back({tok, slot.first / static_cast<double>(slot.second), slot.second});
    }
  }
  std::sort(out.begin(), out.end(), [](const TokenStat& x, const TokenStat& y) {
    return x.weight != y.weight ? x.weight > y.weight : x.token < y.token;
  });
  if (out.size() > top_n) out.resize(top_n);
  return out;
}

std::string join_ids(const std::set<std::string>& ids) {
  std::string s;
  std::size_t i = 0;
  for (const std::string& id : ids) {
    if (i == 20) {
      s += ", ... (" + std::to_string(ids.size()) + " total)";
      break;
    }
    s += (i++ ? ", " : "") + id;
  }
  return s;
}

nlohmann::ordered_json role_json(const RoleStats& r) {
  nlohmann::ordered_json j;
  j["std"] = r.std_dev;
  j["max"] = r.max;
  j["len"] = r.length;
  j["responses"] = r.responses;
  return j;
}

nlohmann::ordered_json tokens_json(const std::vector<TokenStat>& ts) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const TokenStat& t : ts) {
    nlohmann::ordered_json j;
    j["token"] = t.token;
    j["weight"] = t.weight;
    j["count"] = t.count;
    arr.push_back(j);
  }
  return arr;
}

}  // namespace

WeightReport inspect_weights(const std::vector<WeightRecord>& records,
                             const std::vector<trainer::PreferenceExample>& examples,
                             std::size_t min_count, std::size_t top_n) {
  std::map<std::string, const trainer::PreferenceExample*> by_id;
  for (const auto& ex : examples) by_id[ex.example_id] = &ex;

  std::set<std::string> unknown;
  std::set<std::pair<std::string, Role>> seen;
  Accum acc[2];
  for (const WeightRecord& r : records) {
    const auto it = by_id.find(r.example_id);
    if (it == by_id.end()) {
      unknown.insert(r.example_id);
      continue;
    }
    const trainer::PreferenceExample& ex = *it->second;
    const lm::Tokens& tokens = r.role == Role::chosen ? ex.chosen : ex.rejected;
    if (r.weights.size() != tokens.size() || r.weights.empty()) {
      throw Error(ErrorKind::weight_length_mismatch,
                  "example '" + r.example_id + "' " + weights::to_string(r.role) + ": " +
                      std::to_string(r.weights.size()) + " weights for " +
                      std::to_string(tokens.size()) + " tokens");
    }
    seen.insert({r.example_id, r.role});
    add(acc[r.role == Role::chosen ? 0 : 1], r.weights, tokens);
  }
  std::set<std::string> unweighted;
  for (const auto& ex : examples) {
    if (!seen.count({ex.example_id, Role::chosen}) || !seen.count({ex.example_id, Role::rejected})) {
      unweighted.insert(ex.example_id);
    }
  }
  if (!unknown.empty() || !unweighted.empty()) {
    std::string msg;
    if (!unknown.empty()) msg += "weights for unknown examples: " + join_ids(unknown);
    if (!unweighted.empty()) {
      msg += std::string(msg.empty() ? "" : "; ") + "examples without weights: " + join_ids(unweighted);
    }
    throw Error(ErrorKind::join_error, msg);
  }

  WeightReport rep;
  rep.min_count = min_count;
  rep.chosen = finish(acc[0]);
  rep.rejected = finish(acc[1]);
  rep.top_chosen = top(acc[0], min_count, top_n);
  rep.top_rejected = top(acc[1], min_count, top_n);
  return rep;
}

std::string format_report(const WeightReport& r) {
  std::string s;
  char line[160];
  std::snprintf(line, sizeof line, "%-9s %12s %12s %12s\n", "role", "Std", "Max", "Len");
  s += line;
  for (const auto& [name, st] : {std::pair{"chosen", r.chosen}, std::pair{"rejected", r.rejected}}) {
    std::snprintf(line, sizeof line, "%-9s %12.6f %12.6f %12.4f\n", name, st.std_dev, st.max,
                  st.length);
    s += line;
  }
  s += "\ntop tokens (at least " + std::to_string(r.min_count) + " occurrences)\n";
  std::snprintf(line, sizeof line, "%8s %10s %8s   %8s %10s %8s\n", "chosen", "weight", "count",
                "rejected", "weight", "count");
  s += line;
  const std::size_t rows = std::max(r.top_chosen.size(), r.top_rejected.size());
  for (std::size_t i = 0; i < rows; ++i) {
    std::string left(28, ' ');
    std::string right;
    if (i < r.top_chosen.size()) {
      const TokenStat& t = r.top_chosen[i];
      std::snprintf(line, sizeof line, "%8u %10.6f %8zu", t.token, t.weight, t.count);
      left = line;
    }
    if (i < r.top_rejected.size()) {
      const TokenStat& t = r.top_rejected[i];
      std::snprintf(line, sizeof line, "%8u %10.6f %8zu", t.token, t.weight, t.count);
      right = line;
    }
    s += left + "   " + right + "\n";
  }
  return s;
}

std::string to_json(const WeightReport& r) {
  nlohmann::ordered_json j;
  j["chosen"] = role_json(r.chosen);
  j["rejected"] = role_json(r.rejected);
  j["min_count"] = r.min_count;
  j["top_chosen"] = tokens_json(r.top_chosen);
  j["top_rejected"] = tokens_json(r.top_rejected);
  return j.dump();
}

}  // namespace twdpo::inspect
