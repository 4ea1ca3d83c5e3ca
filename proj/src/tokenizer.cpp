// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/tokenizer.hpp"

#include <algorithm>

#include "twdpo/error.hpp"

namespace twdpo {

ByteTokenizer::ByteTokenizer(std::vector<std::string> merges) : merges_(std::move(merges)) {
  for (const std::string& m : merges_) {
    if (m.size() < 2) {
      throw Error(ErrorKind::invalid_argument, "merges must span at least two bytes");
    }
  }
}

ByteTokenizer ByteTokenizer::standard() {
  return ByteTokenizer({
      "th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", "ti", "es", "or", "te",
      "of", "ed", "is", "it", "al", "ar", "st", "to", "nt", "ng", "se", "ha", "as", "ou",
      "io", "le", "ve", "co", "me", "de", "hi", "ri", "ro", "ic", "ne", "ea", "ra", "ce",
      " t", " a", " s", " o", " w", " i", " c", " b", " p", " f", " m", " d", " th", " the",
      "the", "ing", "ion", "and", "ent", "tion", "ed ", "er ", "es ", "s ", "e ", "d ", "t ",
      ", ", ". ", " and", " of", " to", " in", " is", " that", "that", " for", " with",
  });
}

std::vector<ByteTokenizer::Piece> ByteTokenizer::encode(std::string_view text) const {
  std::vector<Piece> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    lm::TokenId id = static_cast<unsigned char>(text[pos]);
    std::size_t len = 1;
    for (std::size_t k = 0; k < merges_.size(); ++k) {
      const std::string& m = merges_[k];
      if (m.size() > len && text.substr(pos, m.size()) == m) {
        id = static_cast<lm::TokenId>(256 + k);
        len = m.size();
      }
    }
    out.push_back({id, pos, pos + len});
    pos += len;
  }
  return out;
}

std::string ByteTokenizer::decode(const lm::Tokens& ids) const {
  std::string out;
  for (lm::TokenId id : ids) {
    if (id < 256) {
      out.push_back(static_cast<char>(id));
    } else if (id - 256 < merges_.size()) {
      out += merges_[id - 256];
    } else {
      throw Error(ErrorKind::invalid_token, "unknown token id " + std::to_string(id));
    }
  }
  return out;
}

lm::Tokens tokens_in_range(const std::vector<ByteTokenizer::Piece>& pieces, std::size_t begin,
                           std::size_t end) {
  lm::Tokens out;
  for (const auto& p : pieces) {
    if (p.end > begin && p.begin < end) {
      out.push_back(p.id);
    }
  }
  return out;
}

}  // namespace twdpo
