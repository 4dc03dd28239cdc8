#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace dql::cli {

inline constexpr const char* kOutputRootEnv = "DQL_OUTPUT_ROOT";

// Output root used when a command is not given an explicit path.
std::filesystem::path default_output_root();

/// Runs one `dql` invocation. args excludes the program name. Returns the
/// process exit code: 0 when every requested artifact was written, 2 for
/// usage errors, 1 for anything else.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dql::cli
