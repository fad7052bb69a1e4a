#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace biomoe {

/// Runs one CLI command (args excludes the program name). Returns the process
/// exit code: 0 success, 1 runtime failure, 2 usage error, 3 invalid
/// configuration or malformed input file.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace biomoe
