// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver behind the `invllava` executable.
//
//   pretrain-lm     train the text-only base LM on the copy task
//   train-inverse   single-stage multimodal run of the inverse model
//   train-baseline  projector baseline, alignment then instruction stage
//   eval            re-evaluate a run directory from its manifest
//   gradcheck       finite-difference check of every trainable tensor
//   compare         sample-budget, parameter and MAC comparison
//   dump-data       write the generated datasets as JSON lines
//
// Exit codes: 0 success, 1 invalid usage or config, 2 training failure
// (for gradcheck: error above the gate).

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace invllava {

inline constexpr const char* kCodeVersion = "0.1.0";
// Largest relative gradient error gradcheck accepts.
inline constexpr double kGradcheckGate = 1e-4;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace invllava
