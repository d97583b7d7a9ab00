#pragma once
#include <string>
#include <vector>

namespace dhformer {

struct SuiteResult {
    std::string name;
    bool passed = false;
    double ms = 0;
    std::string detail;  // empty on success, failure summary otherwise
};

// Built-in verification suites: analytic gradients vs central differences
// (primitives and the full model at a reduced 8x8 configuration), the
// haze-formation inversion identity, metric sanity, tensor shape contracts,
// tile blending, and a checkpoint round trip through scratch_dir.
//
// inject_fault adds a negative control that checks a deliberately corrupted
// derivative rule against finite differences; it must be reported as failed,
// proving the comparison has teeth.
std::vector<SuiteResult> run_selfcheck(const std::string& scratch_dir, bool inject_fault = false);

bool all_passed(const std::vector<SuiteResult>& results);

}  // namespace dhformer
