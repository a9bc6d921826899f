#pragma once

#include "hflow/augment/augment.hpp"
#include "hflow/flow/flow_model.hpp"
#include "hflow/numerics/adam.hpp"

#include <functional>
#include <string>
#include <vector>

namespace hflow::flow {

struct GuidanceConfig {
    bool enabled = true;
    double margin = 1.2;        // c, in bits per dimension
    double ood_fraction = 0.5;  // share of every batch replaced by augmented samples
    double ood_threshold = 100; // minimum MSE (0-255 scale) between an image and its augmentation
    aug::AugmentationSpec augment;

    void validate() const;
};

struct GuidedLoss {
    double loss = 0.0;
    std::vector<double> source_bpd;
    std::vector<double> augmented_bpd;
    std::size_t clipped = 0; // augmented samples with bpd >= margin
};

/// Eq. 4 in bits per dimension:
///   L = sum_src bpd(x) - sum_aug min(c, bpd(aug)).
/// `aug_origin` holds the images the augmented batch was derived from; the
/// OOD threshold is enforced against it. When `accumulate_grads` is set the
/// parameter gradients of L are added to the model's grads. Clipped samples
/// (bpd >= c, ties included) contribute no gradient.
GuidedLoss guided_loss(FlowModel& model, const Tensor& src, const Tensor& aug, const Tensor& aug_origin,
                       const GuidanceConfig& cfg, std::uint64_t noise_seed, bool accumulate_grads);

struct FlowTrainConfig {
    std::size_t iterations = 20000;
    std::size_t batch = 32;
    num::AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.5, 2000};
    std::uint64_t seed = 0;
    std::size_t log_every = 50;
    GuidanceConfig guidance;
};

struct FlowCurvePoint {
    std::size_t step;
    double loss;
    double source_bpd;
    double augmented_bpd; // NaN when no augmented samples in the batch
};

struct FlowTrainResult {
    std::vector<FlowCurvePoint> curve;
    double initial_val_bpd = 0.0;
    double final_val_bpd = 0.0;
    bool diverged = false;
    std::string message;
};

// Fixed noise seed used for every validation / reference BPD evaluation.
inline constexpr std::uint64_t kEvalNoiseSeed = 0x5eed0fb1d5ULL;

double mean_bpd(const FlowModel& model, const Tensor& images);

/// Trains the density on source images. Records the final validation BPD in
/// model.reference_bpd. On a non-finite loss or gradient the parameters are
/// restored to the last logged state and the result is flagged as diverged.
FlowTrainResult train_flow(FlowModel& model, const Tensor& train, const Tensor& val, const FlowTrainConfig& cfg,
                           const std::function<void(const FlowCurvePoint&)>& on_log = {});

} // namespace hflow::flow
