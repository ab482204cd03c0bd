#include <iostream>

#include "freqhead/cli.hpp"

int main(int argc, char** argv) { return freqhead::run_cli(argc, argv, std::cout, std::cerr); }
