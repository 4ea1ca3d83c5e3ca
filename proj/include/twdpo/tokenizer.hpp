// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "twdpo/tiny_lm.hpp"

namespace twdpo {

/// Fixed greedy longest-match tokenizer over single bytes plus a merge list.
/// Ids 0..255 are the bytes; merges follow in list order.
class ByteTokenizer {
 public:
  explicit ByteTokenizer(std::vector<std::string> merges);
  /// Small English-like merge list used by the matching corpus.
  static ByteTokenizer standard();

  struct Piece {
    lm::TokenId id;
    std::size_t begin;
    std::size_t end;
  };

  std::vector<Piece> encode(std::string_view text) const;
  std::string decode(const lm::Tokens& ids) const;
  std::size_t vocab_size() const noexcept { return 256 + merges_.size(); }

 private:
  std::vector<std::string> merges_;
};

/// Ids of the pieces overlapping the byte range [begin, end).
lm::Tokens tokens_in_range(const std::vector<ByteTokenizer::Piece>& pieces, std::size_t begin,
                           std::size_t end);

}  // namespace twdpo
