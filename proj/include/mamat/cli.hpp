#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mamat::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kRunManifest = "run-manifest.json";

enum ExitCode : int { ok = 0, usage = 2, io = 3, numerical = 4, gradcheck_failed = 5 };

// Runs one subcommand: simulate, train, restore, eval or gradcheck.
// args excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mamat::cli
