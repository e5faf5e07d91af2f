#include <iostream>

#include "qg/cli.hpp"

int main(int argc, char** argv) { return qg::parse_and_dispatch(argc, argv, std::cout, std::cerr); }
