#include "mabert/cli.hpp"

int main(int argc, char** argv) { return mabert::cli::run(argc, argv); }
