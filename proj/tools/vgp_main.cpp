#include <vector>

#include "vgp/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return vgp::run_cli(args);
}
