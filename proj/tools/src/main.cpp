#include <iostream>

#include "ddstream_cli/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ddstream::cli::RunCli(args, std::cout, std::cerr);
}
