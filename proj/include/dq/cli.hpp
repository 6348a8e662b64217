// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>

namespace dq {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitMissingDependency = 3;

/// Entry point of the `dqw` tool:
///   dqw gen-data | train-teacher | distill | quantize | evaluate | report [options]
/// Settings resolve as: flag > --config JSON > DQ_SEED (seed only) > default.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dq
