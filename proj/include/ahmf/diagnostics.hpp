#pragma once

#include <vector>

#include "ahmf/gradcheck.hpp"

// Fixed-seed finite-difference fixtures shared by the gradcheck command and
// the acceptance suite. Everything runs on the double instantiation of the
// core; fp32 forward noise at h = 1e-4 would swamp the tolerances.

namespace ahmf::diag {

constexpr double kOpsTol = 1e-4;
constexpr double kModelTol = 1e-3;

// One report per core op. With inject_fault set, an extra fixture with a
// deliberately wrong analytic gradient is appended as a negative control:
// a healthy harness must flag it.
std::vector<GradCheckReport> gradcheck_ops(bool inject_fault = false);

// End-to-end toy model (two frames, two channels, 4x4 fused grid, two heads)
// against the training loss.
GradCheckReport gradcheck_model();

}  // namespace ahmf::diag
