#include "klq/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return klq::cli::run(argc, argv, std::cout, std::cerr); }
