#pragma once

#include <iosfwd>

namespace regconv {

/// Exit codes of every command.
enum ExitCode { kExitPass = 0, kExitMetricFailure = 1, kExitUsage = 2 };

/// Entry point of the regconv command line. Commands: verify, bench-params,
/// train-toy, eval-invariance, make-dataset. Reports go to files named by
/// --out; progress lines to out, diagnostics to err.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace regconv
