#include <iostream>

#include "regconv/cli.hpp"

int main(int argc, char** argv) { return regconv::run_cli(argc, argv, std::cout, std::cerr); }
