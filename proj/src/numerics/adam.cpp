#include "hflow/numerics/adam.hpp"

#include "hflow/numerics/error.hpp"

#include <cmath>

namespace hflow::num {

AdamState::AdamState(AdamConfig cfg) : config(cfg), learning_rate(cfg.learning_rate) {
    if (!(cfg.learning_rate >= 0.0)) throw ContractError("Adam learning rate must be non-negative");
    if (!(cfg.decay_factor > 0.0 && cfg.decay_factor <= 1.0))
        throw ContractError("Adam decay factor must lie in (0, 1]");
    if (cfg.decay_period < 1) throw ContractError("Adam decay period must be positive");
}

void adam_step(const ParamRefs& params, AdamState& state) {
    for (const auto* p : params)
        if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + p->name + "'");

    if (state.first_moment.empty()) {
        state.first_moment.reserve(params.size());
        state.second_moment.reserve(params.size());
        for (const auto* p : params) {
            state.first_moment.push_back(Tensor::zeros_like(p->value));
            state.second_moment.push_back(Tensor::zeros_like(p->value));
        }
    }
    if (state.first_moment.size() != params.size())
        throw ContractError("Adam state tracks " + std::to_string(state.first_moment.size()) + " parameters, got " +
                            std::to_string(params.size()));

    const auto& cfg = state.config;
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const double lr = state.learning_rate;

    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        Tensor& m = state.first_moment[k];
        Tensor& v = state.second_moment[k];
        require_same_shape(m, p.value, "adam_step moments");
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }

    ++state.step;
    if (state.step % cfg.decay_period == 0) state.learning_rate *= cfg.decay_factor;
}

} // namespace hflow::num
