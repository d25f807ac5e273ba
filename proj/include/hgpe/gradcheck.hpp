#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hgpe {

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
};

struct GradCheckOptions {
    uint64_t seed = 1;
    double eps = 1e-4;
    double tol_override = 0.0;       // > 0 forces one tolerance for every op
    std::vector<std::string> only;   // empty = all registered ops
    bool include_negative_control = false;
};

// Names of all registered checks (the negative-control fixture excluded).
std::vector<std::string> gradcheck_op_names();

// Central finite differences against the tape gradients for each selected
// op. Inputs are seeded and sampled away from the relu6/h-swish kinks.
std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opt);

// End-to-end check of the micro model through cross entropy; finite
// differences probe a seeded sample of coordinates per parameter tensor.
GradCheckResult grad_check_model(uint64_t seed, double eps, double tol, int coords_per_param = 6);

}  // namespace hgpe
