#pragma once

#include <ostream>

namespace freqhead {

/// Entry point of the `freqhead` tool. Exit codes: 0 success, 1 runtime
/// failure, 2 usage error or missing input file.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace freqhead
