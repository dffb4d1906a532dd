#pragma once

namespace fsrf::cli {

/// Entry point behind main(). Commands: synth, train, eval, gradcheck.
/// Exit codes: 0 success, 1 internal or numerical failure, 2 usage or
/// input error.
int run(int argc, const char* const* argv);

}  // namespace fsrf::cli
