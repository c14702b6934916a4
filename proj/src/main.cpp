#include "ser/cli.hpp"

int main(int argc, char** argv) { return ser::cli::run(argc, argv); }
