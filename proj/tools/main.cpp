#include <vector>

#include "pastn/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return pastn::cli::run(args);
}
