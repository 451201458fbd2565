#include <iostream>

#include "mivhead/cli.hpp"

int main(int argc, char** argv) { return mivhead::cli::cli_main(argc, argv, std::cout, std::cerr); }
