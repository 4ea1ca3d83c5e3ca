// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/dataset.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "twdpo/error.hpp"
#include "twdpo/kvtext.hpp"

namespace twdpo::trainer {

using weights::Role;
using weights::WeightRecord;

namespace {

void check_weight_length(const PreferenceExample& ex, const std::optional<TokenWeightVector>& a,
                         std::size_t n, const char* role) {
  if (a && a->size() != n) {
    throw Error(ErrorKind::weight_length_mismatch,
                "example '" + ex.example_id + "' " + role + ": " + std::to_string(a->size()) +
                    " weights for " + std::to_string(n) + " tokens");
  }
}

Tokens apply_task(TokenId task, const Tokens& content) {
  Tokens out = content;
  if (task == kReverse) {
    std::reverse(out.begin(), out.end());
  } else if (task == kSort) {
    std::sort(out.begin(), out.end());
  }
  return out;
}

std::string missing_list(const std::vector<std::string>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size() && i < 20; ++i) {
    s += (i ? ", " : "") + ids[i];
  }
  if (ids.size() > 20) {
    s += ", ... (" + std::to_string(ids.size()) + " total)";
  }
  return s;
}

}  // namespace

void PreferenceExample::validate() const {
  if (chosen.empty() || rejected.empty()) {
    throw Error(ErrorKind::invalid_argument, "example '" + example_id + "' has an empty response");
  }
  check_weight_length(*this, weights_chosen, chosen.size(), "chosen");
  check_weight_length(*this, weights_rejected, rejected.size(), "rejected");
}

void SynthTaskSpec::validate() const {
  if (min_content < 1 || max_content < min_content || max_key_span < 1) {
    throw Error(ErrorKind::invalid_argument, "content and key span lengths must be positive");
  }
  if (content_tokens < max_content + max_key_span || vocab_size < kFirstContent + content_tokens) {
    throw Error(ErrorKind::invalid_argument, "vocabulary too small for the content range");
  }
}

Dataset make_synth_dataset(std::uint64_t seed, std::size_t n_train, std::size_t n_valid,
                           const SynthTaskSpec& spec) {
  if (n_train == 0 || n_valid == 0) {
    throw Error(ErrorKind::invalid_argument, "both splits need at least one example");
  }
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(spec.min_content, spec.max_content);
  std::uniform_int_distribution<TokenId> content_tok(
      kFirstContent, static_cast<TokenId>(kFirstContent + spec.content_tokens - 1));
  const TokenId tasks[] = {kCopy, kReverse, kSort};
  std::uniform_int_distribution<std::size_t> task_pick(0, 2);

  const auto make = [&](const std::string& id) {
    PreferenceExample ex;
    ex.example_id = id;
    const TokenId task = tasks[task_pick(rng)];
    Tokens content(len(rng));
    for (TokenId& t : content) t = content_tok(rng);
    ex.prompt = {kBos, task};
    ex.prompt.insert(ex.prompt.end(), content.begin(), content.end());
    ex.prompt.push_back(kSep);
    ex.chosen = apply_task(task, content);
    ex.chosen.push_back(kEos);

    const std::size_t n = content.size();
    std::uniform_int_distribution<std::size_t> span_len(1, std::min(spec.max_key_span, n));
    const std::size_t k = span_len(rng);
    std::uniform_int_distribution<std::size_t> span_start(0, n - k);
    const std::size_t start = span_start(rng);
    ex.key_span = Span{start, start + k};

    const std::set<TokenId> used(content.begin(), content.end());
    ex.rejected = ex.chosen;
    for (std::size_t i = start; i < start + k; ++i) {
      TokenId t = content_tok(rng);
      while (used.count(t) != 0) t = content_tok(rng);
      ex.rejected[i] = t;
    }
    return ex;
  };

  Dataset d;
  for (std::size_t i = 0; i < n_train; ++i) d.train.push_back(make("train-" + std::to_string(i)));
  for (std::size_t i = 0; i < n_valid; ++i) d.valid.push_back(make("valid-" + std::to_string(i)));
  return d;
}

weights::WeightPair oracle_weights(const PreferenceExample& ex) {
  if (!ex.key_span) {
    throw Error(ErrorKind::missing_weights, "example '" + ex.example_id + "' has no key span");
  }
  const auto build = [&](std::size_t n) {
    const Span s = *ex.key_span;
    if (s.end > n || s.size() == 0) {
      throw Error(ErrorKind::invalid_argument,
                  "example '" + ex.example_id + "' key span outside the response");
    }
    TokenWeightVector a{std::vector<double>(n, 0.5 / static_cast<double>(n)), true};
    for (std::size_t i = s.start; i < s.end; ++i) {
      a.weights[i] += 0.5 / static_cast<double>(s.size());
    }
    return a;
  };
  return {build(ex.chosen.size()), build(ex.rejected.size())};
}

void write_dataset(const std::string& path, const std::vector<PreferenceExample>& examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::io_error, "cannot write " + path);
  }
  for (const PreferenceExample& ex : examples) {
    nlohmann::ordered_json j;
    j["example_id"] = ex.example_id;
    j["prompt_tokens"] = ex.prompt;
    j["chosen_tokens"] = ex.chosen;
    j["rejected_tokens"] = ex.rejected;
    if (ex.key_span) {
      j["key_span"] = {ex.key_span->start, ex.key_span->end};
    }
    out << j.dump() << '\n';
  }
  if (!out) {
    throw Error(ErrorKind::io_error, "write failed for " + path);
  }
}

std::vector<PreferenceExample> parse_dataset(const std::string& text, const std::string& origin) {
  std::vector<PreferenceExample> out;
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
      PreferenceExample ex;
      ex.example_id = j.at("example_id").get<std::string>();
      ex.prompt = j.at("prompt_tokens").get<Tokens>();
      ex.chosen = j.at("chosen_tokens").get<Tokens>();
      ex.rejected = j.at("rejected_tokens").get<Tokens>();
      if (j.contains("key_span")) {
        const auto s = j.at("key_span").get<std::vector<std::size_t>>();
        if (s.size() != 2 || s[0] >= s[1]) {
          throw Error(ErrorKind::parse_error, "key_span must be [start, end) with start < end");
        }
        ex.key_span = Span{s[0], s[1]};
      }
      ex.validate();
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse_error, where + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::parse_error, where + ": " + e.what());
    }
  }
  return out;
}

std::vector<PreferenceExample> read_dataset(const std::string& path) {
  return parse_dataset(read_text_file(path), path);
}

std::vector<WeightRecord> weight_records(const std::vector<PreferenceExample>& examples) {
  std::vector<WeightRecord> out;
  for (const PreferenceExample& ex : examples) {
    if (!ex.has_weights()) {
      throw Error(ErrorKind::missing_weights, "example '" + ex.example_id + "' has no weights");
    }
    out.push_back({ex.example_id, Role::chosen, ex.chosen.size(), ex.weights_chosen->weights, 1.0});
    out.push_back(
        {ex.example_id, Role::rejected, ex.rejected.size(), ex.weights_rejected->weights, 1.0});
  }
  return out;
}

void attach_weights(std::vector<PreferenceExample>& examples,
                    const std::vector<WeightRecord>& records) {
  std::map<std::pair<std::string, Role>, const WeightRecord*> index;
  for (const WeightRecord& r : records) index[{r.example_id, r.role}] = &r;
  std::vector<std::string> missing;
  for (PreferenceExample& ex : examples) {
    const auto w = index.find({ex.example_id, Role::chosen});
    const auto l = index.find({ex.example_id, Role::rejected});
    if (w == index.end() || l == index.end()) {
      missing.push_back(ex.example_id);
      continue;
    }
    ex.weights_chosen = TokenWeightVector{w->second->weights, true};
    ex.weights_rejected = TokenWeightVector{l->second->weights, true};
    ex.validate();
  }
  if (!missing.empty()) {
    throw Error(ErrorKind::missing_weights, "no weights for " + missing_list(missing));
  }
}

void attach_uniform_weights(std::vector<PreferenceExample>& examples) {
  for (PreferenceExample& ex : examples) {
    ex.weights_chosen = weights::uniform_weights(ex.chosen.size());
    ex.weights_rejected = weights::uniform_weights(ex.rejected.size());
  }
}

void attach_oracle_weights(std::vector<PreferenceExample>& examples) {
  for (PreferenceExample& ex : examples) {
    auto [w, l] = oracle_weights(ex);
    ex.weights_chosen = std::move(w);
    ex.weights_rejected = std::move(l);
  }
}

void attach_extracted_weights(std::vector<PreferenceExample>& examples,
                              const lm::TinyTransformer& judge,
                              const weights::ExtractionConfig& cfg,
                              const weights::JudgeTemplate& tpl) {
  for (PreferenceExample& ex : examples) {
    const weights::WeightPair raw =
        weights::extract_weights(judge, cfg, tpl, ex.prompt, ex.chosen, ex.rejected);
    ex.weights_chosen = weights::post_process(raw.chosen, cfg);
    ex.weights_rejected = weights::post_process(raw.rejected, cfg);
  }
  spdlog::info("extracted weights for {} examples", examples.size());
}

}  // namespace twdpo::trainer
