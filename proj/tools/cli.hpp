#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vqtok::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one command line (args exclude the program name). Diagnostics go to
/// `err`, results to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vqtok::cli
