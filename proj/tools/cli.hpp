#pragma once

namespace baton::cli {

// Exit codes: 0 success, 2 usage or unreadable input, 1 any other failure.
int run(int argc, const char* const* argv);

}  // namespace baton::cli
