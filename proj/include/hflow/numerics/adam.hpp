#pragma once

#include "hflow/numerics/parameter.hpp"

#include <cstdint>
#include <vector>

namespace hflow::num {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Learning rate is multiplied by decay_factor after every decay_period steps.
    double decay_factor = 1.0;
    std::int64_t decay_period = 1;
};

struct AdamState {
    explicit AdamState(AdamConfig cfg = {});

    AdamConfig config;
    double learning_rate;
    std::int64_t step = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
};

/// One Adam update over `params` using their accumulated grads. Grads are
/// left untouched. Throws NumericError naming the first parameter with a
/// non-finite gradient; in that case no parameter is modified.
void adam_step(const ParamRefs& params, AdamState& state);

} // namespace hflow::num
