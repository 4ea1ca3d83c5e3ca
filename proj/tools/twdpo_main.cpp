// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "twdpo/cli.hpp"

int main(int argc, char** argv) {
  return twdpo::cli::run(argc, argv, std::cout, std::cerr);
}
