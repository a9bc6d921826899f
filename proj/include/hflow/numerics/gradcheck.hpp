#pragma once

#include "hflow/numerics/parameter.hpp"

#include <cstdint>
#include <functional>
#include <string>

namespace hflow::num {

struct GradCheckOptions {
    double step = 1e-5;
    std::size_t samples = 64;
    std::uint64_t seed = 0;
    // Denominator floor for the relative error, as a fraction of the largest
    // sampled gradient magnitude. Keeps near-zero coordinates from dominating.
    double relative_floor = 1e-6;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_parameter;
    bool passed = false;
};

/// Compares analytic gradients against central finite differences.
///
/// `loss(true)` computes the scalar loss and accumulates analytic gradients
/// into the parameters' grad tensors (grads are zeroed before the call).
/// `loss(false)` only evaluates the loss. A random subsample of
/// `options.samples` coordinates (all of them if fewer exist) is perturbed by
/// +/- step.
GradCheckReport grad_check(const std::function<double(bool)>& loss, const ParamRefs& params, double tolerance,
                           const GradCheckOptions& options = {});

} // namespace hflow::num
