#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace structret {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

// Runs one command. `args` excludes the program name. Human-readable progress
// goes to `out`; failures are reported on `err` as a single JSON object.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace structret
