#pragma once

#include <string>
#include <vector>

namespace moespeq {

/// Runs the command-line tool on `args` (argv without the program name).
///
/// Subcommands: gen-trace, analyze, simulate, compare, roofline.
/// Returns 0 on success, 1 on runtime or data errors, 2 on usage errors.
int run_cli(const std::vector<std::string>& args);

}  // namespace moespeq
