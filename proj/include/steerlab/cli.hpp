#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace steerlab {

/// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

/// args[0] is the program name. Every successful stage writes
/// <out>/manifest.<command>.json.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace steerlab
