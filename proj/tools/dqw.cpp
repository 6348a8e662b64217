// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "dq/cli.hpp"

int main(int argc, char** argv) { return dq::run_cli(argc, argv, std::cout, std::cerr); }
