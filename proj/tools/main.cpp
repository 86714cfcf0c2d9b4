#include "gsrec/cli/cli_main.hpp"

int main(int argc, char** argv) { return gsrec::cli::cli_main(argc, argv); }
