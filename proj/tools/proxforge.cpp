#include "proxforge/cli.hpp"

int main(int argc, char** argv) { return proxforge::run_cli(argc, argv); }
