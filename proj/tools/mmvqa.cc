#include <iostream>
#include <string>
#include <vector>

#include "mmbert/cli.h"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mmbert::cli::run(args, std::cout, std::cerr);
}
