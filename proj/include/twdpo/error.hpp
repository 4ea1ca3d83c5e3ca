// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace twdpo {

enum class ErrorKind {
  invalid_argument,
  numeric_failure,
  sequence_too_long,
  invalid_token,
  degenerate_weights,
  weight_length_mismatch,
  parse_error,
  invalid_policy,
  missing_weights,
  join_error,
  io_error,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries one of the kinds above so that
/// callers (the CLI in particular) can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace twdpo
