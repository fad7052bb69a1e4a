#include <iostream>
#include <string>
#include <vector>

#include "biomoe/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return biomoe::run_cli(args, std::cout, std::cerr);
}
