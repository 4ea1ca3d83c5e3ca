// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace twdpo {

/// Parses UTF-8 "key = value" lines. Blank lines and lines starting with '#'
/// are skipped. Throws parse_error naming `origin` and the line number.
std::map<std::string, std::string> parse_key_values(const std::string& text,
                                                    const std::string& origin);

std::string read_text_file(const std::string& path);

double parse_real(const std::string& key, const std::string& value);
std::uint64_t parse_unsigned(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

/// Shortest decimal form that parses back to the identical double.
std::string format_real(double value);

}  // namespace twdpo
