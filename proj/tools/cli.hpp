#pragma once

#include <iosfwd>

namespace po2q::cli {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

/// Parse argv, run the selected subcommand and return its exit code.
/// All normal output goes to `out`, diagnostics and usage text to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace po2q::cli
