#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rcs::cli {

/// Runs one subcommand. argv excludes the program name. Returns 0 on
/// success, 2/3/4 for config/data/numerical failures; failures also print a
/// one-line error JSON to `err`.
int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace rcs::cli
