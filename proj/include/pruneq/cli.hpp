#pragma once

#include <iosfwd>

namespace pruneq {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitMissing = 3,
  kExitNumerical = 4,
};

/// Entry point of the `pruneq` tool: gen-data, train, eval, report.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pruneq
