#include "arfn/harness/cli.hpp"

int main(int argc, char** argv) { return arfn::run_cli(argc, argv); }
