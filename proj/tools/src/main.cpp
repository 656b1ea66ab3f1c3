#include <iostream>

#include "rcs/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return rcs::cli::run_command(args, std::cout, std::cerr);
}
