#include "cocon/cli.hpp"

#include <iostream>
#include <string>
#include <vector>

int main(int argc, char** argv) {
  cocon::tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return cocon::main_dispatch(args, std::cin, std::cout, std::cerr);
}
