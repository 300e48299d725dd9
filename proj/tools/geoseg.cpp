#include "geoseg/cli.hpp"

int main(int argc, char** argv) { return geoseg::run_cli(argc, argv); }
