#include <iostream>
#include <string>
#include <vector>

#include "ugs/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return ugs::run_cli(args, std::cout, std::cerr);
}
