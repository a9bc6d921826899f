#pragma once

#include "hflow/numerics/unet.hpp"

#include <span>
#include <string>
#include <vector>

namespace hflow::flow {

using num::Tensor;

enum class MaskKind { Checkerboard, Channel };
enum class MaskPhase { AFirst, BFirst };

const char* mask_kind_name(MaskKind k);
const char* mask_phase_name(MaskPhase p);

/// Affine coupling transform (data -> latent direction):
///   y_A = z_A,   y_B = z_B * exp(s(z_A)) + t(z_A),   logdet = sum s over B.
///
/// Partition layout:
///   checkerboard: (b, c, i, j) is in A iff (i + j) is even for AFirst, odd for BFirst.
///   channel:      channels [0, floor(C/2)) are A for AFirst; for BFirst they are B.
/// The log-scale is bounded as s = factor[c] * tanh(raw_s) with a learnable
/// per-channel factor. An optional conditioning tensor is appended to the
/// subnet input (used by variational dequantisation).
class CouplingLayer {
public:
    struct Cache {
        Tensor z;
        Tensor cond;
        Tensor net_in;
        num::UNet::Cache net;
        Tensor tanh_raw; // tanh of raw log-scale, transformed channels only
        Tensor s_full;   // log-scale over all channels (0 on A)
        Tensor t_full;   // shift over all channels (0 on A)
    };

    CouplingLayer() = default;
    CouplingLayer(std::string name, MaskKind kind, MaskPhase phase, std::size_t channels, std::size_t cond_channels,
                  const std::vector<std::size_t>& widths, num::Rng& rng);

    MaskKind kind() const { return kind_; }
    MaskPhase phase() const { return phase_; }
    std::size_t channels() const { return channels_; }
    const std::string& name() const { return name_; }

    /// True when element (c, i, j) belongs to the transformed partition B.
    bool transformed(std::size_t c, std::size_t i, std::size_t j) const;

    // `logdet` is accumulated per sample (resized to batch if empty).
    Tensor forward(const Tensor& z, std::vector<double>& logdet, Cache* cache = nullptr,
                   const Tensor* cond = nullptr) const;
    Tensor inverse(const Tensor& y, const Tensor* cond = nullptr) const;
    // gy: dL/dy, glogdet: dL/dlogdet per sample. Returns dL/dz; writes
    // dL/dcond into `gcond` when requested.
    Tensor backward(const Cache& cache, const Tensor& gy, std::span<const double> glogdet, bool want_params,
                    Tensor* gcond = nullptr);

    num::UNet& subnet() { return subnet_; }
    num::Parameter& scale_factor() { return scale_; }
    // Output convolution bias of the subnet: channels [0, T) drive raw s,
    // [T, 2T) drive t, T = number of transformed channels.
    num::Parameter& head_bias();
    num::Parameter& head_weight();
    std::size_t transformed_channels() const { return b_count_; }

    void collect(num::ParamRefs& out);

private:
    struct Coeffs {
        Tensor tanh_raw, s_full, t_full;
    };
    Tensor make_input(const Tensor& z, const Tensor* cond) const;
    Coeffs coefficients(const Tensor& net_out, const Tensor& like) const;

    std::string name_;
    MaskKind kind_ = MaskKind::Checkerboard;
    MaskPhase phase_ = MaskPhase::AFirst;
    std::size_t channels_ = 0;
    std::size_t cond_channels_ = 0;
    std::size_t a_begin_ = 0, a_count_ = 0; // channel mask: A channel range
    std::size_t b_begin_ = 0, b_count_ = 0; // B channel range (all channels for checkerboard)
    num::UNet subnet_;
    num::Parameter scale_;
};

// 2x2 space-to-channel rearrangement: (c, 2i+di, 2j+dj) -> (4c + 2di + dj, i, j).
Tensor squeeze(const Tensor& x);
Tensor unsqueeze(const Tensor& x);

} // namespace hflow::flow
