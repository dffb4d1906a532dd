#include "fsrf/cli.hpp"

int main(int argc, char** argv) { return fsrf::cli::run(argc, argv); }
