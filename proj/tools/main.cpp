#include "mael/cli.hpp"

int main(int argc, char** argv) { return mael::cli::run(argc, argv); }
