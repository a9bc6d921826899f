#pragma once

#include "hflow/evalbench/segmenter.hpp"
#include "hflow/flow/flow_model.hpp"
#include "hflow/harmonizer/harmonizer.hpp"

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace hflow::adapt {

using num::Tensor;

enum class Stopping { SourceBpd, Entropy, OracleDice, FixedSteps };

const char* stopping_name(Stopping s);
Stopping stopping_from_name(const std::string& name);

struct AdaptConfig {
    double learning_rate = 5e-7;
    std::size_t batch = 32;
    std::size_t max_epochs = 50;
    Stopping stopping = Stopping::SourceBpd;
    std::size_t fixed_epochs = 0; // fixed-steps: number of epochs to run
    double bpd_tolerance = 0.02;
    // Source BPD recorded by train_flow; required by source-bpd stopping.
    double source_bpd_reference = std::numeric_limits<double>::quiet_NaN();
    std::size_t entropy_patience = 3;
    // Keep training and evaluating to max_epochs after the criterion fires;
    // the returned parameters are still those of the stop epoch.
    bool full_trace = false;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;    // mean -log p(h(x)) per target image, nats
    double bpd = 0.0;     // mean BPD of the quantized harmonized target set
    double entropy = std::numeric_limits<double>::quiet_NaN(); // task-head prediction entropy
    double dice = std::numeric_limits<double>::quiet_NaN();    // oracle Dice on labeled images
};

struct StopDecision {
    std::size_t epoch = 0;
    bool reached = false; // false: the criterion never fired (stopped at the last epoch)
};

struct AdaptTrace {
    std::vector<EpochRecord> records; // epochs 0..last evaluated
    StopDecision stop;
    bool aborted = false; // non-finite loss
    std::string message;

    const EpochRecord& at_epoch(std::size_t epoch) const;
    // epoch,loss,bpd,entropy,dice with 17 significant digits.
    std::string csv() const;
};

/// First record within tolerance of the reference, or the record at which
/// the BPD crosses it. Reads only the bpd column.
StopDecision stop_source_bpd(const std::vector<EpochRecord>& records, double reference, double tolerance);
/// Running minimum of the entropy column; fires once `patience` epochs pass
/// without a new minimum.
StopDecision stop_entropy(const std::vector<EpochRecord>& records, std::size_t patience);
// Best Dice (earliest on ties); evaluation only.
StopDecision stop_oracle_dice(const std::vector<EpochRecord>& records);
StopDecision stop_fixed(const std::vector<EpochRecord>& records, std::size_t epochs);

StopDecision decide(const std::vector<EpochRecord>& records, const AdaptConfig& cfg);

/// Quantized harmonizer output: round(h(x)) clamped to [0, 255].
Tensor harmonize_levels(const harm::Harmonizer& h, const Tensor& x);

/// Eq. 6 on one batch, as mean bits per dimension of the continuous
/// harmonized images h(x) + u (u uniform from noise_seed). With `backward`
/// the harmonizer grads receive dL/dtheta; the flow's parameters and grads
/// are not touched.
double adaptation_loss(harm::Harmonizer& h, flow::FlowModel& flow, const Tensor& x, std::uint64_t noise_seed,
                       bool backward);

// Optional evaluation inputs recorded in the trace.
struct Probes {
    const eval::Segmenter* task = nullptr; // entropy column
    const Tensor* labeled_images = nullptr; // dice column (with labels)
    const Tensor* labels = nullptr;
};

/// Fine-tunes h on unlabeled target images against the frozen flow. Each
/// epoch is one shuffled pass over `target`; after every epoch the whole
/// target set is evaluated. On return h holds the parameters of the stop epoch.
AdaptTrace adapt(harm::Harmonizer& h, flow::FlowModel& flow, const Tensor& target, const AdaptConfig& cfg,
                 const Probes& probes = {});

} // namespace hflow::adapt
