#pragma once

#include <string>
#include <vector>

namespace ldit {

// Entry point shared by the CLI binary and the acceptance tests. argv-style
// arguments, without the program name. Returns the process exit code:
// 0 success, 1 runtime failure, 2 usage/configuration error.
int run_command(const std::vector<std::string>& args);

} // namespace ldit
