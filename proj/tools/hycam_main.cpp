#include <vector>

#include "hycam/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return hycam::run_cli(std::move(args));
}
