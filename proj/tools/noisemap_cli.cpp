#include "noisemap/cli.hpp"

int main(int argc, char** argv) { return noisemap::run_cli(argc, argv); }
