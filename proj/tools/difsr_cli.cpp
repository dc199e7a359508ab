#include "difsr/cli/cli.hpp"

int main(int argc, char** argv) { return difsr::cli::run_cli(argc, argv); }
