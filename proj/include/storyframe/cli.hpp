#pragma once

namespace sf {

// Dispatches the command line; returns the process exit code
// (0 success, 1 validation/usage error, 2 internal error).
int cli_main(int argc, char** argv);

}  // namespace sf
