#pragma once

#include <iosfwd>

namespace stt::cli {

// Exit codes: 0 ok, 1 data or runtime failure, 2 usage or configuration error.
constexpr int kExitOk = 0;
constexpr int kExitData = 1;
constexpr int kExitUsage = 2;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stt::cli
