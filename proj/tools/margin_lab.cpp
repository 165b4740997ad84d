#include "margin_lab/harness/cli.hpp"

int main(int argc, char** argv) { return margin_lab::cli_main(argc, argv); }
