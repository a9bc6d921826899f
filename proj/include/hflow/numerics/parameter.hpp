#pragma once

#include "hflow/numerics/tensor.hpp"

#include <string>
#include <vector>

namespace hflow::num {

/// A trainable tensor with its gradient accumulator.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string name_, Tensor value_)
        : name(std::move(name_)), value(std::move(value_)), grad(Tensor::zeros_like(value)) {}

    void zero_grad() { grad.fill(0.0); }
};

using ParamRefs = std::vector<Parameter*>;

void zero_grads(const ParamRefs& params);
std::size_t parameter_count(const ParamRefs& params);

// Copies of the parameter values, and the inverse.
std::vector<Tensor> snapshot(const ParamRefs& params);
void restore(const ParamRefs& params, const std::vector<Tensor>& values);

} // namespace hflow::num
