#pragma once

#include "hflow/numerics/parameter.hpp"
#include "hflow/numerics/tensor.hpp"

namespace hflow::num {

// Cross-correlation over NCHW input with OIHW kernels (odd, square).
//   out[n, o, i, j] = bias[o] + sum_{c,a,b} w[o, c, a, b] * x[n, c, i*stride + a - pad, j*stride + b - pad]
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);

// Backward pass of conv2d. Any of the output pointers may be null to skip
// that gradient. `gx` is overwritten; `gw` and `gb` are accumulated.
void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& gy, int stride, int pad, Tensor* gx,
                     Tensor* gw, Tensor* gb);

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, int stride, int pad);

/// concat[ELU(x), ELU(-x)] along channels, alpha = 1.
Tensor celu2(const Tensor& x);
Tensor celu2_backward(const Tensor& x, const Tensor& gy);

// Per-channel y = gamma[c] * x + beta[c].
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);
Tensor channel_affine_backward(const Tensor& x, const Tensor& gamma, const Tensor& gy, Tensor* ggamma,
                               Tensor* gbeta);

// Nearest-neighbour 2x upsampling and its adjoint (2x2 sum pooling).
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& gy);

/// 2-D convolution layer owning its kernels and bias.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, int stride = 1);

    Tensor forward(const Tensor& x) const { return conv2d(x, weight.value, bias.value, stride, pad); }
    // Returns grad wrt x (if want_input) and accumulates parameter grads (if want_params).
    Tensor backward(const Tensor& x, const Tensor& gy, bool want_input, bool want_params);

    std::size_t in_channels() const { return weight.value.dim(1); }
    std::size_t out_channels() const { return weight.value.dim(0); }
    void collect(ParamRefs& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }

    Parameter weight;
    Parameter bias;
    int stride = 1;
    int pad = 0;
};

/// Learnable per-channel scale and shift (no batch statistics).
class ChannelAffine {
public:
    ChannelAffine() = default;
    ChannelAffine(const std::string& name, std::size_t channels);

    Tensor forward(const Tensor& x) const { return channel_affine(x, gamma.value, beta.value); }
    Tensor backward(const Tensor& x, const Tensor& gy, bool want_params);
    void collect(ParamRefs& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    Parameter gamma;
    Parameter beta;
};

} // namespace hflow::num
