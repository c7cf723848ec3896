#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cmtrace::cli {

// Runs the command line `args` (args[0] is the program name). Returns the
// process exit status: 0 on success, 1 on a runtime or record-level error,
// 2 on a usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cmtrace::cli
