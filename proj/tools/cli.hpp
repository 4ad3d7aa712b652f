#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mtinet::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIo = 3,
  kNumerical = 4,
  kCompatibility = 5,
};

/// Runs one command line (without the program name). `env_seed` stands in for
/// the MTI_SEED environment variable; pass nullptr when it is unset.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const char* env_seed);

}  // namespace mtinet::cli
