#include <iostream>

#include "lemevit/cli.hpp"

int main(int argc, char** argv) { return lemevit::cli::dispatch(argc, argv, std::cout, std::cerr); }
