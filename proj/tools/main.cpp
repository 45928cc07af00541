#include "refseg/experiment.hpp"

int main(int argc, char** argv) { return refseg::run_cli(argc, argv); }
