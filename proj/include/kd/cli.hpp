#pragma once

#include <iosfwd>

namespace kd {

// Entry point of the `kd` command. Returns 0 on success, 1 on usage errors
// (bad flags, configs, missing files, tokenizer mismatch) and 2 on runtime
// failures.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace kd
