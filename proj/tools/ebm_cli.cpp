#include <iostream>

#include "ebm/cli.hpp"

int main(int argc, char** argv) { return ebm::run_cli(argc, argv, std::cout, std::cerr); }
