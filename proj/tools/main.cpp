#include "doctorai/cli.hpp"

int main(int argc, char** argv) { return doctorai::cli::run(argc, argv); }
