#include "glandseg/cli.hpp"

int main(int argc, char** argv) { return glandseg::run_cli(argc, argv); }
