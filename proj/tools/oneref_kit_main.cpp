#include "oneref/cli.hpp"

int main(int argc, char** argv) { return oneref::run_cli(argc, argv); }
