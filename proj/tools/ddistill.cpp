// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#include "ddistill/cli.hpp"

int main(int argc, char** argv) { return ddistill::cli::run(argc, argv); }
