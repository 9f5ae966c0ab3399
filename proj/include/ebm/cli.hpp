#pragma once

#include <ostream>

namespace ebm {

// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,      // usage, config or file-format error
  kExitDivergence = 3  // numerical divergence
};

// Entry point of the `ebm` tool. Results go to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ebm
