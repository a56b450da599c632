#include <iostream>

#include "pruneq/cli.hpp"

int main(int argc, char** argv) { return pruneq::run_cli(argc, argv, std::cout, std::cerr); }
