#include <iostream>
#include <string>
#include <vector>

#include "amieod/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return amieod::cli::run(args, std::cout, std::cerr);
}
