#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ddstream::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Runs one command. `args` excludes the program name. Reports go to `out`,
// the resolved configuration and diagnostics to `err`.
int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ddstream::cli
