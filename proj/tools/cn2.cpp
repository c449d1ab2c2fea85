#include "cn2/cli.hpp"

int main(int argc, char** argv) { return cn2::cli::run(argc, argv); }
