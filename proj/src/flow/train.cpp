#include "hflow/flow/train.hpp"

#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace hflow::flow {

void GuidanceConfig::validate() const {
    if (!(margin > 0.0)) throw ContractError("guidance: margin c must be positive");
    if (!(ood_fraction >= 0.0 && ood_fraction <= 1.0)) throw ContractError("guidance: ood fraction must be in [0, 1]");
    if (!(ood_threshold > 0.0)) throw ContractError("guidance: ood threshold must be positive");
    augment.validate();
}

GuidedLoss guided_loss(FlowModel& model, const Tensor& src, const Tensor& aug, const Tensor& aug_origin,
                       const GuidanceConfig& cfg, std::uint64_t noise_seed, bool accumulate_grads) {
    cfg.validate();
    const double to_bits = 1.0 / (std::numbers::ln2 * static_cast<double>(model.dims()));
    GuidedLoss out;
    if (src.size() > 0) {
        FlowModel::DiscreteCache cache;
        const auto lp = model.log_prob(src, noise_seed, accumulate_grads ? &cache : nullptr);
        out.source_bpd = bits_per_dim(lp, model.dims());
        for (double b : out.source_bpd) out.loss += b;
        if (accumulate_grads) model.log_prob_backward(cache, std::vector<double>(lp.size(), -to_bits));
    }
    if (aug.size() > 0) {
        num::require_same_shape(aug, aug_origin, "guided_loss");
        for (std::size_t b = 0; b < aug.n(); ++b) {
            const double d = aug::mse(num::slice_batch(aug_origin, b, b + 1), num::slice_batch(aug, b, b + 1));
            if (!(d > cfg.ood_threshold))
                throw ContractError("guided_loss: augmented sample " + std::to_string(b) + " has MSE " +
                                    std::to_string(d) + " <= threshold " + std::to_string(cfg.ood_threshold) +
                                    "; resample it");
        }
        FlowModel::DiscreteCache cache;
        const auto lp = model.log_prob(aug, num::derive_seed(noise_seed, 0xa06), accumulate_grads ? &cache : nullptr);
        out.augmented_bpd = bits_per_dim(lp, model.dims());
        std::vector<double> w(lp.size(), 0.0);
        for (std::size_t b = 0; b < lp.size(); ++b) {
            const double bpd = out.augmented_bpd[b];
            if (bpd >= cfg.margin) {
                out.loss -= cfg.margin;
                ++out.clipped;
            } else {
                out.loss -= bpd;
                w[b] = to_bits; // d(-bpd)/dlogp
            }
        }
        if (accumulate_grads && out.clipped < lp.size()) model.log_prob_backward(cache, w);
    }
    return out;
}

double mean_bpd(const FlowModel& model, const Tensor& images) {
    if (images.n() == 0) throw ContractError("mean_bpd: empty image set");
    const auto lp = log_prob_chunked(model, images, kEvalNoiseSeed);
    double acc = 0.0;
    for (double b : bits_per_dim(lp, model.dims())) acc += b;
    return acc / static_cast<double>(lp.size());
}

namespace {

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

FlowTrainResult train_flow(FlowModel& model, const Tensor& train, const Tensor& val, const FlowTrainConfig& cfg,
                           const std::function<void(const FlowCurvePoint&)>& on_log) {
    num::require_rank(train, 4, "train_flow");
    if (train.n() == 0) throw ContractError("train_flow: empty training set");
    if (cfg.batch == 0) throw ContractError("train_flow: batch size must be positive");
    if (cfg.guidance.enabled) cfg.guidance.validate();

    FlowTrainResult result;
    const num::ParamRefs params = model.params();
    num::AdamState adam(cfg.adam);
    std::vector<Tensor> good = num::snapshot(params);
    const bool have_val = val.size() > 0;
    if (have_val) result.initial_val_bpd = mean_bpd(model, val);

    const std::size_t n_aug =
        cfg.guidance.enabled ? static_cast<std::size_t>(std::lround(cfg.guidance.ood_fraction * cfg.batch)) : 0;
    const std::size_t n_src = cfg.batch - n_aug;
    const auto pick = [&](num::Rng& rng, std::size_t count) {
        std::vector<std::size_t> idx(count);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.n()) - 1));
        return num::gather_batch(train, idx);
    };

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        num::Rng rng(num::derive_seed(cfg.seed, it));
        const Tensor src = pick(rng, n_src);
        Tensor origin, aug;
        if (n_aug > 0) {
            origin = pick(rng, n_aug);
            aug = aug::apply_ood(cfg.guidance.augment, origin, num::derive_seed(cfg.seed ^ 0xa11ce, it),
                                 cfg.guidance.ood_threshold);
        }
        try {
            num::zero_grads(params);
            const GuidedLoss gl =
                guided_loss(model, src, aug, origin, cfg.guidance, num::derive_seed(cfg.seed ^ 0xd0e5, it), true);
            if (!std::isfinite(gl.loss)) throw NumericError("train_flow: non-finite loss");
            num::adam_step(params, adam);
            if ((it + 1) % std::max<std::size_t>(cfg.log_every, 1) == 0 || it + 1 == cfg.iterations) {
                FlowCurvePoint pt{it + 1, gl.loss, mean_of(gl.source_bpd), mean_of(gl.augmented_bpd)};
                result.curve.push_back(pt);
                if (on_log) on_log(pt);
                good = num::snapshot(params);
            }
        } catch (const NumericError& e) {
            num::restore(params, good);
            result.diverged = true;
            result.message = "iteration " + std::to_string(it + 1) + ": " + e.what();
            break;
        }
    }
    if (have_val) {
        result.final_val_bpd = mean_bpd(model, val);
        model.reference_bpd = result.final_val_bpd;
    }
    return result;
}

} // namespace hflow::flow
