#include <vector>

#include "moespeq/cli.hpp"

int main(int argc, char** argv) {
  return moespeq::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
