#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace amieod::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point shared by the `amieod` binary and the tests. argv[0] is the
/// program name.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace amieod::cli
