#include "miqrec/cli.hpp"

int main(int argc, char** argv) { return miqrec::cli::run(argc, argv); }
