#include <iostream>

#include "edgeseg/experiment.hpp"

int main(int argc, char** argv) { return edgeseg::run_cli(argc, argv, std::cout, std::cerr); }
