#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mapworld::cli {

/// Exit codes of the command-line entry point.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand. `args` excludes the program name. Errors are reported
/// on `err` and mapped to a nonzero exit code; nothing propagates.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mapworld::cli
