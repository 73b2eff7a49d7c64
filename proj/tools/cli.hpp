#pragma once

#include <string>
#include <vector>

namespace pop::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kDataError = 2;
inline constexpr int kInvariant = 3;

/// Runs `pop <args...>` in process; args exclude the program name.
int run(const std::vector<std::string>& args);

}  // namespace pop::cli
