#pragma once

#include <iosfwd>

namespace mael::cli {

// Exit codes: 0 success, 1 operational failure, 2 usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace mael::cli
