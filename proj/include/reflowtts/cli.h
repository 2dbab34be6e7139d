#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rf {

// Exit codes shared by every subcommand.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitSolver = 4,
  kExitMetric = 5,
};

// Runs one `reflowtts <command> [flags]` invocation in-process. `args`
// excludes the program name. Expected errors print one line to `err` and
// return the matching exit code; nothing escapes as an exception.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rf
