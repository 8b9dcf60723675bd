#pragma once

#include <iosfwd>

namespace nahtm {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

// Entry point of the `nahtm` tool: build, synth-embed, train, eval, grid.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace nahtm
