#include "decomp/app.hpp"

int main(int argc, char** argv) { return decomp::app::run_cli(argc, argv); }
