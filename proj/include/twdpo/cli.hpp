// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>

namespace twdpo::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerificationFailed = 1;
inline constexpr int kExitUsage = 2;

/// Everything needed to replay a command: resolved configuration, paths,
/// seed and checksums of the files read and written.
struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  std::map<std::string, std::string> checksums;

  std::string to_json() const;
  void write(const std::string& path) const;
};

/// FNV-1a over the file bytes, as 16 hex digits.
std::string file_checksum(const std::string& path);

/// Applies TWDPO_LOG_LEVEL (error, warn, info, debug; default info) to a
/// logger writing to standard error.
void configure_logging();

/// Parses argv and runs one command. Returns the process exit status.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace twdpo::cli
