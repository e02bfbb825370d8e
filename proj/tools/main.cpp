#include <iostream>

#include "snaplab/cli.hpp"

int main(int argc, char** argv) { return snaplab::cli::dispatch(argc, argv, std::cout, std::cerr); }
