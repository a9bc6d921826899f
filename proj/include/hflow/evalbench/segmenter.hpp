#pragma once

#include "hflow/numerics/adam.hpp"
#include "hflow/numerics/archive.hpp"
#include "hflow/numerics/unet.hpp"

#include <filesystem>
#include <vector>

namespace hflow::eval {

using num::Tensor;

struct SegmenterConfig {
    std::size_t classes = 5;
    std::vector<std::size_t> widths{8, 16, 32};
    std::size_t convs_per_block = 2;
    std::uint64_t init_seed = 0;
};

/// Small encoder-decoder with a per-pixel softmax over K classes. Input
/// intensities (0-255) are scaled to [-1, 1].
class Segmenter {
public:
    struct Cache {
        num::UNet::Cache net;
        Tensor probs;
    };

    Segmenter() = default;
    explicit Segmenter(SegmenterConfig cfg);

    const SegmenterConfig& config() const { return cfg_; }

    Tensor logits(const Tensor& x, Cache* cache = nullptr) const;
    // N x K x H x W, each pixel's row sums to 1.
    Tensor probabilities(const Tensor& x, std::size_t chunk = 16) const;
    // N x 1 x H x W argmax labels.
    Tensor predict(const Tensor& x, std::size_t chunk = 16) const;

    /// Mean per-pixel cross-entropy of `labels`; accumulates parameter grads
    /// when `backward` is set.
    double cross_entropy(const Tensor& x, const Tensor& labels, bool backward);

    num::ParamRefs params();
    num::TensorArchive to_archive() const;
    static Segmenter from_archive(const num::TensorArchive& archive);
    void save(const std::filesystem::path& path) const;
    static Segmenter load(const std::filesystem::path& path);

private:
    SegmenterConfig cfg_;
    num::UNet net_;
};

Tensor softmax_channels(const Tensor& logits);
Tensor argmax_channels(const Tensor& probs);

struct SegTrainConfig {
    std::size_t iterations = 600;
    std::size_t batch = 8;
    num::AdamConfig adam{2e-3, 0.9, 0.999, 1e-8, 0.5, 300};
    std::uint64_t seed = 0;
};

struct SegTrainResult {
    std::vector<double> loss; // per iteration
    bool diverged = false;
    std::string message;
};

// Plain supervised training on source images; no intensity augmentation.
SegTrainResult train_segmenter(Segmenter& seg, const Tensor& images, const Tensor& masks, const SegTrainConfig& cfg);

struct SegEvaluation {
    double dice = 0.0;       // mean over images of the foreground-mean Dice
    double hd95 = 0.0;       // mean over valid (image, class) pairs
    std::size_t hd95_missing = 0; // pairs skipped because a class was empty
    double entropy = 0.0;    // mean per-pixel prediction entropy
    std::vector<double> per_image_dice;
};

SegEvaluation evaluate_segmentation(const Segmenter& seg, const Tensor& images, const Tensor& masks);

} // namespace hflow::eval
