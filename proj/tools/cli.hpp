#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ficnet::cli {

/// Exit codes: 0 success, 1 runtime or data failure, 2 usage or configuration error.
enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

/// Runs one command line (without the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ficnet::cli
