#include "fml/cli.hpp"

int main(int argc, char** argv) { return fml::cli::run(argc, argv); }
