#include "fcvae/cli.hpp"

int main(int argc, char** argv) { return fcvae::cli::run(argc, argv); }
