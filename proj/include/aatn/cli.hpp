#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace aatn {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Subcommands train, eval, diagnose and gradcheck. Returns 2 on bad usage
/// (with usage text on `err`) and 1 on runtime failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aatn
