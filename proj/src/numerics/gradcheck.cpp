#include "hflow/numerics/gradcheck.hpp"

#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace hflow::num {

GradCheckReport grad_check(const std::function<double(bool)>& loss, const ParamRefs& params, double tolerance,
                           const GradCheckOptions& options) {
    struct Coord {
        std::size_t param;
        std::size_t index;
    };
    std::vector<Coord> all;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p]->value.size(); ++i) all.push_back({p, i});
    if (all.empty()) throw ContractError("grad_check: no parameters to check");

    zero_grads(params);
    loss(true);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto* p : params) analytic.push_back(p->grad);

    Rng rng(options.seed);
    std::shuffle(all.begin(), all.end(), rng.engine());
    all.resize(std::min(all.size(), std::max<std::size_t>(options.samples, 1)));

    std::vector<double> numeric(all.size());
    double scale = 0.0;
    for (std::size_t k = 0; k < all.size(); ++k) {
        double& v = params[all[k].param]->value[all[k].index];
        const double orig = v;
        v = orig + options.step;
        const double up = loss(false);
        v = orig - options.step;
        const double down = loss(false);
        v = orig;
        numeric[k] = (up - down) / (2.0 * options.step);
        scale = std::max({scale, std::abs(numeric[k]), std::abs(analytic[all[k].param][all[k].index])});
    }

    GradCheckReport report;
    report.coordinates = all.size();
    const double floor = std::max(options.relative_floor * scale, 1e-300);
    for (std::size_t k = 0; k < all.size(); ++k) {
        const double a = analytic[all[k].param][all[k].index];
        const double diff = std::abs(a - numeric[k]);
        const double rel = diff / std::max({std::abs(a), std::abs(numeric[k]), floor});
        report.max_absolute_error = std::max(report.max_absolute_error, diff);
        if (rel > report.max_relative_error) {
            report.max_relative_error = rel;
            report.worst_parameter = params[all[k].param]->name + "[" + std::to_string(all[k].index) + "]";
        }
    }
    report.passed = report.max_relative_error < tolerance;
    zero_grads(params);
    return report;
}

} // namespace hflow::num
