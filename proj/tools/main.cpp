// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "moerace/commands.hpp"

int main(int argc, char** argv) { return moerace::run_cli(argc, argv, std::cout, std::cerr); }
