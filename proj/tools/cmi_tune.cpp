#include <string>
#include <vector>

#include "cmitune/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cmitune::run_cli(args);
}
