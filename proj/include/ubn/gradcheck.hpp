#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ubn/tensor.hpp"

namespace ubn {

struct GradCheckOptions {
    std::uint64_t seed = 1;
    double h = 1e-5;     // central-difference step
    double tol = 1e-4;   // max relative error
};

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    bool pass = false;
};

/// Central finite differences on sampled entries of `leaf` against the
/// analytic gradient of the scalar produced by `forward_scalar`. The forward
/// closure must be pure and is re-evaluated per perturbation without
/// recording. Returns the worst relative error seen.
double check_gradient(const std::function<Tensor()>& forward_scalar, Tensor leaf, double h,
                      int max_entries, Rng& rng);

/// Runs the finite-difference suite over every differentiable operation plus
/// the full-model composite (20 sampled parameters). Intended to run in f64.
std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& opt);

}  // namespace ubn
