#include <bfpca/cli.hpp>

int main(int argc, char** argv) { return bfpca::run_cli(argc, argv); }
