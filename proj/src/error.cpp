// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/error.hpp"

namespace twdpo {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::numeric_failure: return "numeric-failure";
    case ErrorKind::sequence_too_long: return "sequence-too-long";
    case ErrorKind::invalid_token: return "invalid-token";
    case ErrorKind::degenerate_weights: return "degenerate-weights";
    case ErrorKind::weight_length_mismatch: return "weight-length-mismatch";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::invalid_policy: return "invalid-policy";
    case ErrorKind::missing_weights: return "missing-weights";
    case ErrorKind::join_error: return "join-error";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace twdpo
