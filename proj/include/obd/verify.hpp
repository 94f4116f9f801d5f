#pragma once

#include <ostream>

namespace obd {

// Compact self-check suites behind the `verify` subcommand: the derivation
// equality chain against the explicit Hessian, decomposition optimality
// against competitors, whitening and coloring identities, and the K-cache
// error accounting. Prints one [PASS]/[FAIL] line per suite; returns true
// iff every suite passed. Smaller instance counts than the acceptance tests
// keep it interactive.
bool run_verification_suites(std::ostream& out);

}  // namespace obd
