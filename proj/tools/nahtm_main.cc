#include <iostream>

#include "nahtm/cli.h"

int main(int argc, char** argv) { return nahtm::run_cli(argc, argv, std::cout, std::cerr); }
