#pragma once

#include "hflow/flow/coupling.hpp"
#include "hflow/numerics/archive.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

namespace hflow::flow {

enum class DequantMode { Uniform, Variational };

// Map from dequantised intensities c in [0, 256] to the flow's input space.
enum class Preprocess { Logit, Linear };

const char* preprocess_name(Preprocess p);
Preprocess preprocess_from_name(const std::string& name);

const char* dequant_name(DequantMode m);
DequantMode dequant_from_name(const std::string& name);

struct StepSpec {
    bool squeeze = false;
    MaskKind mask = MaskKind::Checkerboard;
    MaskPhase phase = MaskPhase::AFirst;
};

/// Three stages of depth/3 couplings: checkerboard; squeeze + channel;
/// squeeze + channel. Phases alternate inside each stage. depth % 3 == 0.
std::vector<StepSpec> standard_steps(std::size_t depth);

struct FlowConfig {
    std::size_t channels = 1;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t depth = 12;
    std::vector<std::size_t> subnet_widths{16, 32, 48, 64};
    DequantMode dequant = DequantMode::Uniform;
    std::size_t dequant_layers = 2;
    std::vector<std::size_t> dequant_widths{8, 16};
    // logit: c -> logit(alpha + (1 - 2 alpha) c / 256).
    // linear: c -> L (2 c / 256 - 1) with L = logit(1 - alpha), the same
    // interval without the logit's pull towards the ends of the range.
    Preprocess preprocess = Preprocess::Logit;
    double logit_alpha = 0.05;
    std::uint64_t init_seed = 0;
    // Explicit transform list; standard_steps(depth) when empty. depth 0 with
    // no steps is the identity flow.
    std::vector<StepSpec> steps;
};

/// Density model over 256-level images.
///
/// Pipeline (data -> latent): x + u (dequantisation, u in [0,1)) -> logit
/// preprocessing -> coupling/squeeze steps -> standard normal. Because the
/// preprocessing maps [0, 256] into a bounded interval, the discrete density
/// sums to slightly less than one (the normal tail mass outside that interval).
class FlowModel {
public:
    struct Step {
        bool squeeze = false;
        CouplingLayer layer;
    };
    struct DensityCache {
        std::vector<CouplingLayer::Cache> layers;
        std::vector<num::Shape> shapes; // input shape of every step
        Tensor z;
    };
    struct ContinuousCache {
        Tensor p;                     // preprocessed probability-scale values
        std::vector<std::uint8_t> clamped;
        DensityCache density;
    };
    struct DiscreteCache {
        ContinuousCache cont;
        Tensor cond;                  // variational: normalised image
        std::vector<CouplingLayer::Cache> dequant;
        Tensor vq;                    // variational: pre-sigmoid noise
    };

    FlowModel() = default;
    explicit FlowModel(FlowConfig cfg);

    const FlowConfig& config() const { return cfg_; }
    std::size_t dims() const { return cfg_.channels * cfg_.height * cfg_.width; }
    std::size_t coupling_count() const;
    const std::vector<StepSpec>& steps() const { return cfg_.steps; }
    CouplingLayer& coupling(std::size_t k);
    const CouplingLayer& coupling(std::size_t k) const;
    std::vector<CouplingLayer>& dequant_layers() { return dequant_; }
    num::Shape latent_shape(std::size_t n) const;

    // Density of continuous inputs in the preprocessed space (no logit, no
    // dequantisation). Natural log, per sample.
    std::vector<double> log_density(const Tensor& v, DensityCache* cache = nullptr) const;
    // Accumulates d(sum_b w_b log_density_b) into parameter grads (if
    // want_params) and returns the gradient wrt v.
    Tensor log_density_backward(const DensityCache& cache, std::span<const double> weights, bool want_params);

    Tensor encode(const Tensor& v, std::vector<double>* logdet = nullptr) const;
    Tensor decode(const Tensor& z) const;

    // Density of continuous intensities c (the dequantised image domain).
    // Values are clamped to [0, 256]; clamped elements receive zero gradient.
    std::vector<double> log_prob_continuous(const Tensor& c, ContinuousCache* cache = nullptr) const;
    Tensor log_prob_continuous_backward(const ContinuousCache& cache, std::span<const double> weights,
                                        bool want_params);

    // Discrete images with integer levels in [0, 255]. Single-sample
    // dequantisation estimate; noise for batch item b comes from
    // derive_seed(noise_seed, first_index + b).
    std::vector<double> log_prob(const Tensor& x, std::uint64_t noise_seed, DiscreteCache* cache = nullptr,
                                 std::size_t first_index = 0) const;
    // Parameter grads of sum_b w_b log_prob_b (density and dequantiser).
    void log_prob_backward(const DiscreteCache& cache, std::span<const double> weights);

    Tensor sample(std::size_t n, std::uint64_t seed) const;

    num::ParamRefs params();

    // Source validation BPD recorded by training (NaN when unset).
    double reference_bpd = std::numeric_limits<double>::quiet_NaN();

    num::TensorArchive to_archive() const;
    static FlowModel from_archive(const num::TensorArchive& archive);
    void save(const std::filesystem::path& path) const;
    static FlowModel load(const std::filesystem::path& path);

private:
    FlowConfig cfg_;
    std::vector<Step> steps_;
    std::vector<CouplingLayer> dequant_;
};

double bits_per_dim(double log_prob, std::size_t dims);
std::vector<double> bits_per_dim(std::span<const double> log_prob, std::size_t dims);

// Evaluate log_prob over a large set in chunks (same noise convention as a
// single call on the whole set).
std::vector<double> log_prob_chunked(const FlowModel& model, const Tensor& x, std::uint64_t noise_seed,
                                     std::size_t chunk = 16);

} // namespace hflow::flow
