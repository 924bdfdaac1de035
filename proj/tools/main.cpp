#include <iostream>
#include <string>
#include <vector>

#include "toadhm/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return toadhm::run_cli(args, std::cout, std::cerr);
}
