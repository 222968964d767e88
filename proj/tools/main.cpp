#include "cli.hpp"

#include <ATen/Parallel.h>

#include <iostream>

int main(int argc, char** argv) {
  at::set_num_threads(1);
  std::vector<std::string> args(argv + 1, argv + argc);
  return vqtok::cli::run(args, std::cout, std::cerr);
}
