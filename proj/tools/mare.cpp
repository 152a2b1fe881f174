// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "mare/cli.hpp"

int main(int argc, char** argv) { return mare::cli::run(argc, argv, std::cout, std::cerr); }
