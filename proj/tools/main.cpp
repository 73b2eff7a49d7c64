#include "cli.hpp"

int main(int argc, char** argv) { return pop::cli::run({argv + 1, argv + argc}); }
