#include <iostream>

#include "gippo/cli/commands.hpp"

int main(int argc, char** argv) { return gippo::cli::run_cli(argc, argv, std::cout, std::cerr); }
