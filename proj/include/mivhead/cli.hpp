#pragma once

#include <ostream>

namespace mivhead::cli {

// Exit codes: 0 ok, 1 failure, 2 usage error.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mivhead::cli
