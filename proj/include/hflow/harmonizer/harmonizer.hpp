#pragma once

#include "hflow/augment/augment.hpp"
#include "hflow/numerics/adam.hpp"
#include "hflow/numerics/archive.hpp"
#include "hflow/numerics/unet.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace hflow::harm {

using num::Tensor;

enum class Variant { UNet, AffineHead };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct HarmonizerConfig {
    Variant variant = Variant::UNet;
    std::vector<std::size_t> widths{16, 32, 48, 64, 64};
    std::size_t convs_per_block = 2;
    std::uint64_t init_seed = 0;
};

/// Image-to-image network on 0-255 intensities.
///
/// Internally works on x/255. The unet variant is residual,
///   h(x) = 255 * (x/255 + net(x/255)),
/// and the affine-head variant computes
///   h(x) = 255 * (alpha * x/255 + beta),  alpha = 1 + a . GAP(bottleneck) + a0,
/// with beta taken from the network head. Both heads start at zero, so an
/// untrained harmonizer is the identity.
class Harmonizer {
public:
    struct Cache {
        Tensor xn;
        num::UNet::Cache net;
        Tensor pooled;             // affine head: N x width
        std::vector<double> alpha; // affine head, per sample
    };

    Harmonizer() = default;
    explicit Harmonizer(HarmonizerConfig cfg);

    const HarmonizerConfig& config() const { return cfg_; }
    // Spatial extents must be divisible by this.
    std::size_t required_multiple() const { return std::size_t{1} << (cfg_.widths.size() - 1); }

    Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
    // gy: dL/dh(x) on the 0-255 scale. Returns dL/dx when want_input.
    Tensor backward(const Cache& cache, const Tensor& gy, bool want_params, bool want_input = false);

    // Affine head only: (alpha, beta) for testing.
    num::Parameter& alpha_weight() { return alpha_w_; }
    num::Parameter& alpha_bias() { return alpha_b_; }

    num::ParamRefs params();

    num::TensorArchive to_archive() const;
    static Harmonizer from_archive(const num::TensorArchive& archive);
    void save(const std::filesystem::path& path) const;
    static Harmonizer load(const std::filesystem::path& path);

private:
    HarmonizerConfig cfg_;
    num::UNet net_;
    num::Parameter alpha_w_;
    num::Parameter alpha_b_;
};

// Forward in chunks without caches.
Tensor harmonize(const Harmonizer& h, const Tensor& x, std::size_t chunk = 16);

struct SsimConfig {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 255.0;
};

/// Mean local SSIM over all valid window positions of one image pair
/// (1 x 1 x H x W or the b-th item of a batch). When `grad_x` is given,
/// dSSIM/dx is written into it (same shape as x).
double ssim(const Tensor& x, const Tensor& y, const SsimConfig& cfg = {}, Tensor* grad_x = nullptr);
std::vector<double> gaussian_window(const SsimConfig& cfg);

/// Per-sample reconstruction loss mean|pred - target|/255 + (1 - SSIM(pred, target)),
/// averaged over the batch. Writes dL/dpred (0-255 scale) when requested.
double reconstruction_loss(const Tensor& pred, const Tensor& target, Tensor* grad_pred = nullptr,
                           const SsimConfig& cfg = {});
// Mean absolute error on the 0-255 scale.
double mean_l1(const Tensor& a, const Tensor& b);

struct PretrainConfig {
    std::size_t iterations = 5000;
    std::size_t batch = 64;
    num::AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.5, 500};
    std::uint64_t seed = 0;
    std::size_t val_every = 50;
    aug::AugmentationSpec augment;
};

struct PretrainPoint {
    std::size_t step;
    double train_loss;
    double val_loss; // NaN when not evaluated at this step
};

struct PretrainResult {
    std::vector<PretrainPoint> curve;
    double best_val_loss = 0.0;
    std::size_t best_step = 0;
    bool diverged = false;
    std::string message;
};

// Seed for the fixed validation augmentations.
inline constexpr std::uint64_t kValAugmentSeed = 0x7a11da7eULL;

/// Trains h to undo augmentations of source images; keeps the parameters of
/// the best validation step.
PretrainResult pretrain(Harmonizer& h, const Tensor& train, const Tensor& val, const PretrainConfig& cfg,
                        const std::function<void(const PretrainPoint&)>& on_log = {});

} // namespace hflow::harm
