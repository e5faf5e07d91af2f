#pragma once

#include <iosfwd>

namespace qg {

/// Exit codes of the command-line front end.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;      // runtime error: missing file, bad config, I/O
inline constexpr int kExitUsage = 2;        // bad flag or argument
inline constexpr int kExitChecksFailed = 3; // `reproduce --strict` with a failed check

/// Parses argv and runs one verb: train, attack, sweep, analyze-l1, reproduce.
int parse_and_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qg
