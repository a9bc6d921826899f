#include "hflow/adapt/adapt.hpp"

#include "hflow/evalbench/metrics.hpp"
#include "hflow/flow/train.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"
#include "hflow/numerics/text.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace hflow::adapt {

const char* stopping_name(Stopping s) {
    switch (s) {
    case Stopping::SourceBpd: return "source-bpd";
    case Stopping::Entropy: return "entropy";
    case Stopping::OracleDice: return "oracle-dice";
    case Stopping::FixedSteps: return "fixed-steps";
    }
    return "?";
}

Stopping stopping_from_name(const std::string& name) {
    for (Stopping s : {Stopping::SourceBpd, Stopping::Entropy, Stopping::OracleDice, Stopping::FixedSteps})
        if (name == stopping_name(s)) return s;
    throw ContractError("unknown stopping criterion '" + name +
                        "' (expected source-bpd, entropy, oracle-dice or fixed-steps)");
}

void AdaptConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ContractError("adapt: learning rate must be finite and >= 0");
    if (batch == 0) throw ContractError("adapt: batch size must be positive");
    if (!(bpd_tolerance >= 0.0)) throw ContractError("adapt: bpd tolerance must be >= 0");
    if (stopping == Stopping::SourceBpd && !std::isfinite(source_bpd_reference))
        throw ContractError("adapt: source-bpd stopping needs the source BPD reference recorded by train-flow");
}

const EpochRecord& AdaptTrace::at_epoch(std::size_t epoch) const {
    for (const auto& r : records)
        if (r.epoch == epoch) return r;
    throw ContractError("adapt trace has no record for epoch " + std::to_string(epoch));
}

std::string AdaptTrace::csv() const {
    std::ostringstream os;
    os << "epoch,loss,bpd,entropy,dice\n";
    for (const auto& r : records)
        os << r.epoch << ',' << num::format_double(r.loss) << ',' << num::format_double(r.bpd) << ','
           << num::format_double(r.entropy) << ',' << num::format_double(r.dice) << '\n';
    return os.str();
}

namespace {

void require_records(const std::vector<EpochRecord>& records, const char* op) {
    if (records.empty()) throw ContractError(std::string(op) + ": empty trace");
}

} // namespace

StopDecision stop_source_bpd(const std::vector<EpochRecord>& records, double reference, double tolerance) {
    require_records(records, "stop_source_bpd");
    if (!std::isfinite(reference))
        throw ContractError("stop_source_bpd: no source BPD reference; train the flow first or pass one explicitly");
    for (std::size_t i = 0; i < records.size(); ++i) {
        const double gap = records[i].bpd - reference;
        if (std::abs(gap) <= tolerance) return {records[i].epoch, true};
        if (i > 0 && (records[i - 1].bpd - reference) * gap < 0.0) return {records[i].epoch, true};
    }
    return {records.back().epoch, false};
}

StopDecision stop_entropy(const std::vector<EpochRecord>& records, std::size_t patience) {
    require_records(records, "stop_entropy");
    std::size_t best = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (std::isnan(records[i].entropy))
            throw ContractError("stop_entropy: no task-head entropy recorded; supply a segmenter or use "
                                "stopping=source-bpd");
        if (records[i].entropy < records[best].entropy) best = i;
        if (i - best >= patience) return {records[best].epoch, true};
    }
    return {records[best].epoch, false};
}

StopDecision stop_oracle_dice(const std::vector<EpochRecord>& records) {
    require_records(records, "stop_oracle_dice");
    std::size_t best = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (std::isnan(records[i].dice))
            throw ContractError("stop_oracle_dice: no Dice recorded; oracle-dice stopping needs labeled images");
        if (records[i].dice > records[best].dice) best = i;
    }
    return {records[best].epoch, false};
}

StopDecision stop_fixed(const std::vector<EpochRecord>& records, std::size_t epochs) {
    require_records(records, "stop_fixed");
    for (const auto& r : records)
        if (r.epoch == epochs) return {r.epoch, true};
    return {records.back().epoch, false};
}

StopDecision decide(const std::vector<EpochRecord>& records, const AdaptConfig& cfg) {
    switch (cfg.stopping) {
    case Stopping::SourceBpd: return stop_source_bpd(records, cfg.source_bpd_reference, cfg.bpd_tolerance);
    case Stopping::Entropy: return stop_entropy(records, cfg.entropy_patience);
    case Stopping::OracleDice: return stop_oracle_dice(records);
    case Stopping::FixedSteps: return stop_fixed(records, cfg.fixed_epochs);
    }
    throw ContractError("adapt: unknown stopping criterion");
}

Tensor harmonize_levels(const harm::Harmonizer& h, const Tensor& x) {
    Tensor y = harm::harmonize(h, x);
    for (double& v : y.storage()) v = std::clamp(std::round(v), 0.0, 255.0);
    return y;
}

namespace {

void add_uniform_noise(Tensor& y, std::uint64_t noise_seed, std::size_t first_index) {
    const std::size_t item = y.size() / y.n();
    for (std::size_t b = 0; b < y.n(); ++b) {
        num::Rng rng(num::derive_seed(noise_seed, first_index + b));
        for (std::size_t i = 0; i < item; ++i) y[b * item + i] += rng.uniform();
    }
}

// Mean -log p over a set with fixed noise, in chunks.
double mean_nll(const harm::Harmonizer& h, const flow::FlowModel& flow, const Tensor& x) {
    double s = 0.0;
    constexpr std::size_t chunk = 16;
    for (std::size_t b = 0; b < x.n(); b += chunk) {
        Tensor y = h.forward(num::slice_batch(x, b, std::min(x.n(), b + chunk)));
        add_uniform_noise(y, flow::kEvalNoiseSeed, b);
        for (double lp : flow.log_prob_continuous(y)) s -= lp;
    }
    return s / static_cast<double>(x.n());
}

EpochRecord evaluate(std::size_t epoch, const harm::Harmonizer& h, const flow::FlowModel& flow, const Tensor& target,
                     const Probes& probes) {
    EpochRecord r;
    r.epoch = epoch;
    r.loss = mean_nll(h, flow, target);
    r.bpd = flow::bits_per_dim(-r.loss, flow.dims());
    if (probes.task) {
        const auto ent = eval::mean_entropy(probes.task->probabilities(harmonize_levels(h, target)));
        r.entropy = std::accumulate(ent.begin(), ent.end(), 0.0) / static_cast<double>(ent.size());
        if (probes.labeled_images && probes.labels) {
            const Tensor pred = probes.task->predict(harmonize_levels(h, *probes.labeled_images));
            double d = 0.0;
            for (std::size_t b = 0; b < pred.n(); ++b)
                d += eval::dice(num::slice_batch(pred, b, b + 1), num::slice_batch(*probes.labels, b, b + 1),
                                probes.task->config().classes)
                         .mean;
            r.dice = d / static_cast<double>(pred.n());
        }
    }
    if (!std::isfinite(r.loss)) throw NumericError("adapt: non-finite target likelihood at epoch " + std::to_string(epoch));
    return r;
}

} // namespace

double adaptation_loss(harm::Harmonizer& h, flow::FlowModel& flow, const Tensor& x, std::uint64_t noise_seed,
                       bool backward) {
    harm::Harmonizer::Cache hc;
    Tensor y = h.forward(x, backward ? &hc : nullptr);
    add_uniform_noise(y, noise_seed, 0);
    flow::FlowModel::ContinuousCache fc;
    const auto lp = flow.log_prob_continuous(y, backward ? &fc : nullptr);
    const double scale = 1.0 / (static_cast<double>(x.n() * flow.dims()) * std::numbers::ln2);
    double loss = 0.0;
    for (double v : lp) loss -= v * scale;
    if (backward) {
        const std::vector<double> w(x.n(), -scale);
        const Tensor gy = flow.log_prob_continuous_backward(fc, w, false);
        h.backward(hc, gy, true);
    }
    return loss;
}

AdaptTrace adapt(harm::Harmonizer& h, flow::FlowModel& flow, const Tensor& target, const AdaptConfig& cfg,
                 const Probes& probes) {
    cfg.validate();
    num::require_rank(target, 4, "adapt target");
    if (target.n() == 0) throw ContractError("adapt: empty target set");
    if (cfg.stopping == Stopping::Entropy && !probes.task)
        throw ContractError("adapt: entropy stopping needs a task head (segmenter); use stopping=source-bpd instead");
    if (cfg.stopping == Stopping::OracleDice && !(probes.task && probes.labeled_images && probes.labels))
        throw ContractError("adapt: oracle-dice stopping needs a segmenter and labeled target images");

    const auto flow_before = num::encode_archive(flow.to_archive());
    const num::ParamRefs params = h.params();
    num::AdamConfig ac;
    ac.learning_rate = cfg.learning_rate;
    num::AdamState adam(ac);

    AdaptTrace trace;
    std::vector<std::vector<Tensor>> snaps;
    trace.records.push_back(evaluate(0, h, flow, target, probes));
    snaps.push_back(num::snapshot(params));
    trace.stop = decide(trace.records, cfg);

    const std::size_t n = target.n();
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs && (cfg.full_trace || !trace.stop.reached); ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        num::Rng rng(num::derive_seed(cfg.seed, epoch));
        for (std::size_t i = n; i-- > 1;)
            std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
        try {
            for (std::size_t b = 0; b < n; b += cfg.batch, ++step) {
                const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + cfg.batch)));
                num::zero_grads(params);
                const double l = adaptation_loss(h, flow, num::gather_batch(target, idx),
                                                 num::derive_seed(cfg.seed ^ 0xada9ULL, step), true);
                if (!std::isfinite(l)) throw NumericError("adapt: non-finite loss at epoch " + std::to_string(epoch));
                num::adam_step(params, adam);
            }
            trace.records.push_back(evaluate(epoch, h, flow, target, probes));
        } catch (const NumericError& e) {
            trace.aborted = true;
            trace.message = e.what();
            break;
        }
        snaps.push_back(num::snapshot(params));
        trace.stop = decide(trace.records, cfg);
    }
    num::restore(params, snaps[trace.stop.epoch]);
    num::zero_grads(params);
    if (num::encode_archive(flow.to_archive()) != flow_before)
        throw NumericError("adapt: flow parameters changed during adaptation");
    return trace;
}

} // namespace hflow::adapt
