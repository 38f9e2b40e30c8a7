#pragma once

#include <ostream>

namespace hseg::cli {

/// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

/// Parses argv (argv[0] is the program name) and runs one subcommand.
/// Diagnostics go to `err` as a single line; reports without an output
/// path go to `out`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hseg::cli
