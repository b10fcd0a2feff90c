#include "dtape/cli.hpp"

int main(int argc, char** argv) { return dtape::run_cli(argc, argv); }
