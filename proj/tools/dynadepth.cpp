// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#include "dynadepth/runner.hpp"

int main(int argc, char** argv) { return dynadepth::cli::run(argc, argv); }
