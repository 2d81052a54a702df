#include <iostream>
#include <string>
#include <vector>

#include "crosskd/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return crosskd::run_cli(args, std::cout, std::cerr);
}
