#include <string>
#include <vector>

#include "crk/cli.hpp"

int main(int argc, char** argv) {
    return crk::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
