#include "mtslm/cli.hpp"

int main(int argc, char** argv) { return mtslm::cli::run(argc, argv); }
