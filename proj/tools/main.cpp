#include "gradflow/cli.hpp"

int main(int argc, char** argv) { return gradflow::cli::run(argc, argv); }
