#include <cia/cli.hpp>

int main(int argc, char** argv) { return cia::cli_main(argc, argv); }
