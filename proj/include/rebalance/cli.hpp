#pragma once

#include <string>
#include <vector>

namespace rebalance::cli {

// Parses and runs one command-line invocation (argv without the program
// name). Returns the process exit code: 0 success, 1 pipeline failure,
// 2 usage error.
int run(std::vector<std::string> args);

}  // namespace rebalance::cli
