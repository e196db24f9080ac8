#include "talos/cli.hpp"

int main(int argc, char** argv) { return talos::run_cli(argc, argv); }
