#include <iostream>
#include <string>
#include <vector>

#include "ctxmem/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ctxmem::run_cli(args, std::cout, std::cerr);
}
