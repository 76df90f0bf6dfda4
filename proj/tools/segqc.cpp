#include "segqc/cli.hpp"

int main(int argc, char** argv) { return segqc::cli::run(argc, argv); }
