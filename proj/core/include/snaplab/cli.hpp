#pragma once

#include <iosfwd>

namespace snaplab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

/// Entry point of the `snaplab` tool. Subcommands: train, distill, evolve,
/// sample, bench, decoder-distill, eval-curve, reproduce.
/// Returns 0 on success, 1 for invalid configuration (message names the
/// field), 2 for usage errors, 3 when a run fails.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace snaplab::cli
