#pragma once

#include "hflow/numerics/ops.hpp"
#include "hflow/numerics/random.hpp"

#include <string>
#include <vector>

namespace hflow::num {

struct UNetConfig {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::vector<std::size_t> widths{16, 32, 48, 64}; // one entry per scale
    std::size_t convs_per_block = 1;
    bool normalize = false; // per-channel affine after every hidden conv
    double init_gain = 1.0;
    bool zero_head = true; // zero-initialise the output convolution
};

/// Shallow U-shaped conv net built from [celu2 -> conv -> (affine)] units.
///
/// Scale s runs at 1/2^s resolution (strided conv down, nearest upsampling
/// up, additive skips). The number of scales actually used shrinks when the
/// input is too small to be halved the configured number of times.
class UNet {
public:
    struct Unit {
        bool activation = true;
        Conv2d conv;
        bool normalize = false;
        ChannelAffine affine;
    };
    struct UnitCache {
        Tensor input;
        Tensor activated;
        Tensor conv_out;
    };
    struct Cache {
        std::size_t scales = 0;
        std::vector<UnitCache> units; // in execution order
        Tensor bottleneck;
    };

    UNet() = default;
    UNet(const std::string& name, UNetConfig cfg, Rng& rng);

    const UNetConfig& config() const { return cfg_; }

    // Number of scales used for an input of the given spatial extent.
    std::size_t scales_for(std::size_t h, std::size_t w) const;

    Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
    // Returns grad wrt the input. `g_bottleneck`, if given, is an extra
    // gradient wrt the coarsest encoder feature map (cache.bottleneck).
    Tensor backward(const Cache& cache, const Tensor& gy, bool want_params, const Tensor* g_bottleneck = nullptr);

    void collect(ParamRefs& out);

    // Output convolution (zero-initialised when cfg.zero_head).
    Conv2d& head_conv() { return head_.conv; }

private:
    Tensor run_unit(const Unit& u, const Tensor& x, Cache* cache) const;
    Tensor unit_backward(Unit& u, const UnitCache& c, const Tensor& gy, bool want_params);

    UNetConfig cfg_;
    // Encoder: enc_[s] holds convs_per_block units for scale s.
    std::vector<std::vector<Unit>> enc_;
    // Decoder: dec_[s] (s >= 1) holds the unit mapping scale s to s-1 followed
    // by convs_per_block - 1 refinement units at scale s-1.
    std::vector<std::vector<Unit>> dec_;
    Unit head_;
};

} // namespace hflow::num
