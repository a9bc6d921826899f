#include "hflow/numerics/ops.hpp"

#include "hflow/numerics/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

namespace hflow::num {

namespace {

struct Range {
    std::ptrdiff_t lo;
    std::ptrdiff_t hi; // inclusive; empty when hi < lo
};

// Output positions o with 0 <= o*stride + k - pad < in.
Range valid_range(std::ptrdiff_t in, std::ptrdiff_t out, std::ptrdiff_t k, std::ptrdiff_t stride,
                  std::ptrdiff_t pad) {
    std::ptrdiff_t lo = pad - k;
    lo = lo <= 0 ? 0 : (lo + stride - 1) / stride;
    std::ptrdiff_t hi_num = in - 1 + pad - k;
    std::ptrdiff_t hi = hi_num < 0 ? -1 : hi_num / stride;
    hi = std::min(hi, out - 1);
    return {lo, hi};
}

void check_conv(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    require_rank(x, 4, "conv2d input");
    require_rank(weight, 4, "conv2d kernels");
    if (weight.dim(1) != x.c())
        throw ContractError("conv2d: kernel expects " + std::to_string(weight.dim(1)) + " input channels, input " +
                            shape_string(x.shape()) + " has " + std::to_string(x.c()));
    if (weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0)
        throw ContractError("conv2d: kernel spatial extent must be odd and square, got " +
                            shape_string(weight.shape()));
    if (bias.size() != weight.dim(0))
        throw ContractError("conv2d: bias has " + std::to_string(bias.size()) + " entries for " +
                            std::to_string(weight.dim(0)) + " output channels");
    if (stride < 1 || pad < 0) throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
    if (x.h() + 2 * static_cast<std::size_t>(pad) < weight.dim(2) ||
        x.w() + 2 * static_cast<std::size_t>(pad) < weight.dim(3))
        throw ContractError("conv2d: input " + shape_string(x.shape()) + " smaller than kernel " +
                            shape_string(weight.shape()));
}

inline double elu(double v) { return v > 0.0 ? v : std::expm1(v); }
inline double elu_grad(double v) { return v > 0.0 ? 1.0 : std::exp(v); }

} // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, int stride, int pad) {
    return (in + 2 * static_cast<std::size_t>(pad) - kernel) / static_cast<std::size_t>(stride) + 1;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvGeometry {
    std::size_t C, H, W, K, OH, OW;
    int stride, pad;
    std::size_t rows() const { return C * K * K; }
    std::size_t cols() const { return OH * OW; }
};

// Unfold one batch item into a (C*K*K) x (OH*OW) patch matrix.
void im2col(const double* img, const ConvGeometry& g, double* col) {
    for (std::size_t c = 0; c < g.C; ++c) {
        const double* ip = img + c * g.H * g.W;
        for (std::size_t kh = 0; kh < g.K; ++kh) {
            const Range rh = valid_range(g.H, g.OH, kh, g.stride, g.pad);
            for (std::size_t kw = 0; kw < g.K; ++kw) {
                const Range rw = valid_range(g.W, g.OW, kw, g.stride, g.pad);
                double* row = col + ((c * g.K + kh) * g.K + kw) * g.cols();
                std::fill(row, row + g.cols(), 0.0);
                for (std::ptrdiff_t oh = rh.lo; oh <= rh.hi; ++oh) {
                    const double* irow = ip + (oh * g.stride + kh - g.pad) * g.W;
                    double* orow = row + oh * g.OW;
                    if (g.stride == 1) {
                        const double* src = irow + kw - g.pad;
                        for (std::ptrdiff_t ow = rw.lo; ow <= rw.hi; ++ow) orow[ow] = src[ow];
                    } else {
                        for (std::ptrdiff_t ow = rw.lo; ow <= rw.hi; ++ow) orow[ow] = irow[ow * g.stride + kw - g.pad];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add patch gradients back onto the image.
void col2im(const double* col, const ConvGeometry& g, double* img) {
    for (std::size_t c = 0; c < g.C; ++c) {
        double* ip = img + c * g.H * g.W;
        for (std::size_t kh = 0; kh < g.K; ++kh) {
            const Range rh = valid_range(g.H, g.OH, kh, g.stride, g.pad);
            for (std::size_t kw = 0; kw < g.K; ++kw) {
                const Range rw = valid_range(g.W, g.OW, kw, g.stride, g.pad);
                const double* row = col + ((c * g.K + kh) * g.K + kw) * g.cols();
                for (std::ptrdiff_t oh = rh.lo; oh <= rh.hi; ++oh) {
                    double* irow = ip + (oh * g.stride + kh - g.pad) * g.W;
                    const double* grow = row + oh * g.OW;
                    if (g.stride == 1) {
                        double* dst = irow + kw - g.pad;
                        for (std::ptrdiff_t ow = rw.lo; ow <= rw.hi; ++ow) dst[ow] += grow[ow];
                    } else {
                        for (std::ptrdiff_t ow = rw.lo; ow <= rw.hi; ++ow) irow[ow * g.stride + kw - g.pad] += grow[ow];
                    }
                }
            }
        }
    }
}

ConvGeometry geometry(const Tensor& x, const Tensor& weight, int stride, int pad) {
    const std::size_t K = weight.dim(2);
    return {x.c(), x.h(), x.w(), K, conv_out_extent(x.h(), K, stride, pad), conv_out_extent(x.w(), K, stride, pad),
            stride, pad};
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    check_conv(x, weight, bias, stride, pad);
    const ConvGeometry g = geometry(x, weight, stride, pad);
    const std::size_t O = weight.dim(0);
    Tensor out = Tensor::nchw(x.n(), O, g.OH, g.OW);
    std::vector<double> col(g.rows() * g.cols());
    ConstMatMap wmat(weight.data(), O, g.rows());
    ConstMatMap cmat(col.data(), g.rows(), g.cols());
    for (std::size_t n = 0; n < x.n(); ++n) {
        im2col(x.plane_ptr(n, 0), g, col.data());
        MatMap omat(out.plane_ptr(n, 0), O, g.cols());
        omat.noalias() = wmat * cmat;
        for (std::size_t o = 0; o < O; ++o) omat.row(o).array() += bias[o];
    }
    return out;
}

void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& gy, int stride, int pad, Tensor* gx,
                     Tensor* gw, Tensor* gb) {
    check_conv(x, weight, Tensor({weight.dim(0)}), stride, pad);
    const ConvGeometry g = geometry(x, weight, stride, pad);
    const std::size_t O = weight.dim(0);
    if (gy.rank() != 4 || gy.n() != x.n() || gy.c() != O || gy.h() != g.OH || gy.w() != g.OW)
        throw ContractError("conv2d_backward: output gradient " + shape_string(gy.shape()) + " does not match " +
                            shape_string({x.n(), O, g.OH, g.OW}));
    if (gx) *gx = Tensor::zeros_like(x);
    if (gw) require_same_shape(*gw, weight, "conv2d_backward kernels");
    std::vector<double> col(gw ? g.rows() * g.cols() : 0);
    std::vector<double> gcol(gx ? g.rows() * g.cols() : 0);
    ConstMatMap wmat(weight.data(), O, g.rows());
    for (std::size_t n = 0; n < x.n(); ++n) {
        ConstMatMap gmat(gy.plane_ptr(n, 0), O, g.cols());
        // Plain loop: Eigen's vectorised sum peels by pointer alignment, which
        // would make the rounding depend on where the allocator put gy.
        if (gb)
            for (std::size_t o = 0; o < O; ++o) {
                const double* row = gy.plane_ptr(n, 0) + o * g.cols();
                double s = 0.0;
                for (std::size_t i = 0; i < g.cols(); ++i) s += row[i];
                (*gb)[o] += s;
            }
        if (gw) {
            im2col(x.plane_ptr(n, 0), g, col.data());
            MatMap gwmat(gw->data(), O, g.rows());
            gwmat.noalias() += gmat * ConstMatMap(col.data(), g.rows(), g.cols()).transpose();
        }
        if (gx) {
            MatMap gcmat(gcol.data(), g.rows(), g.cols());
            gcmat.noalias() = wmat.transpose() * gmat;
            col2im(gcol.data(), g, gx->plane_ptr(n, 0));
        }
    }
}

Tensor celu2(const Tensor& x) {
    require_rank(x, 4, "celu2");
    const std::size_t C = x.c(), P = x.plane();
    Tensor out = Tensor::nchw(x.n(), 2 * C, x.h(), x.w());
    for (std::size_t n = 0; n < x.n(); ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* ip = x.plane_ptr(n, c);
            double* pos = out.plane_ptr(n, c);
            double* neg = out.plane_ptr(n, C + c);
            for (std::size_t i = 0; i < P; ++i) {
                pos[i] = elu(ip[i]);
                neg[i] = elu(-ip[i]);
            }
        }
    }
    return out;
}

Tensor celu2_backward(const Tensor& x, const Tensor& gy) {
    require_rank(x, 4, "celu2_backward");
    const std::size_t C = x.c(), P = x.plane();
    if (gy.rank() != 4 || gy.c() != 2 * C || gy.n() != x.n() || gy.plane() != P)
        throw ContractError("celu2_backward: gradient " + shape_string(gy.shape()) + " incompatible with input " +
                            shape_string(x.shape()));
    Tensor gx = Tensor::zeros_like(x);
    for (std::size_t n = 0; n < x.n(); ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* ip = x.plane_ptr(n, c);
            const double* gpos = gy.plane_ptr(n, c);
            const double* gneg = gy.plane_ptr(n, C + c);
            double* g = gx.plane_ptr(n, c);
            for (std::size_t i = 0; i < P; ++i) g[i] = gpos[i] * elu_grad(ip[i]) - gneg[i] * elu_grad(-ip[i]);
        }
    }
    return gx;
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    require_rank(x, 4, "channel_affine");
    if (gamma.size() != x.c() || beta.size() != x.c())
        throw ContractError("channel_affine: " + std::to_string(gamma.size()) + " scales for " +
                            std::to_string(x.c()) + " channels");
    Tensor out = Tensor::zeros_like(x);
    const std::size_t P = x.plane();
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
            const double* ip = x.plane_ptr(n, c);
            double* op = out.plane_ptr(n, c);
            const double g = gamma[c], b = beta[c];
            for (std::size_t i = 0; i < P; ++i) op[i] = g * ip[i] + b;
        }
    return out;
}

Tensor channel_affine_backward(const Tensor& x, const Tensor& gamma, const Tensor& gy, Tensor* ggamma,
                               Tensor* gbeta) {
    require_same_shape(x, gy, "channel_affine_backward");
    Tensor gx = Tensor::zeros_like(x);
    const std::size_t P = x.plane();
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
            const double* ip = x.plane_ptr(n, c);
            const double* gp = gy.plane_ptr(n, c);
            double* gxp = gx.plane_ptr(n, c);
            const double g = gamma[c];
            double sg = 0.0, sgx = 0.0;
            for (std::size_t i = 0; i < P; ++i) {
                gxp[i] = g * gp[i];
                sg += gp[i];
                sgx += gp[i] * ip[i];
            }
            if (ggamma) (*ggamma)[c] += sgx;
            if (gbeta) (*gbeta)[c] += sg;
        }
    return gx;
}

Tensor upsample2(const Tensor& x) {
    require_rank(x, 4, "upsample2");
    const std::size_t H = x.h(), W = x.w();
    Tensor out = Tensor::nchw(x.n(), x.c(), 2 * H, 2 * W);
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
            const double* ip = x.plane_ptr(n, c);
            double* op = out.plane_ptr(n, c);
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    const double v = ip[i * W + j];
                    op[(2 * i) * 2 * W + 2 * j] = v;
                    op[(2 * i) * 2 * W + 2 * j + 1] = v;
                    op[(2 * i + 1) * 2 * W + 2 * j] = v;
                    op[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
                }
        }
    return out;
}

Tensor upsample2_backward(const Tensor& gy) {
    require_rank(gy, 4, "upsample2_backward");
    if (gy.h() % 2 || gy.w() % 2)
        throw ContractError("upsample2_backward: odd gradient extent " + shape_string(gy.shape()));
    const std::size_t H = gy.h() / 2, W = gy.w() / 2;
    Tensor gx = Tensor::nchw(gy.n(), gy.c(), H, W);
    for (std::size_t n = 0; n < gy.n(); ++n)
        for (std::size_t c = 0; c < gy.c(); ++c) {
            const double* gp = gy.plane_ptr(n, c);
            double* op = gx.plane_ptr(n, c);
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    op[i * W + j] = gp[(2 * i) * 2 * W + 2 * j] + gp[(2 * i) * 2 * W + 2 * j + 1] +
                                    gp[(2 * i + 1) * 2 * W + 2 * j] + gp[(2 * i + 1) * 2 * W + 2 * j + 1];
        }
    return gx;
}

Conv2d::Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, int stride_)
    : weight(name + ".weight", Tensor({out_ch, in_ch, kernel, kernel})),
      bias(name + ".bias", Tensor({out_ch})),
      stride(stride_),
      pad(static_cast<int>(kernel / 2)) {
    if (kernel % 2 == 0) throw ContractError("Conv2d " + name + ": kernel extent must be odd");
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& gy, bool want_input, bool want_params) {
    Tensor gx;
    conv2d_backward(x, weight.value, gy, stride, pad, want_input ? &gx : nullptr,
                    want_params ? &weight.grad : nullptr, want_params ? &bias.grad : nullptr);
    return gx;
}

ChannelAffine::ChannelAffine(const std::string& name, std::size_t channels)
    : gamma(name + ".gamma", Tensor({channels}, 1.0)), beta(name + ".beta", Tensor({channels})) {}

Tensor ChannelAffine::backward(const Tensor& x, const Tensor& gy, bool want_params) {
    return channel_affine_backward(x, gamma.value, gy, want_params ? &gamma.grad : nullptr,
                                   want_params ? &beta.grad : nullptr);
}

std::vector<Tensor> snapshot(const ParamRefs& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Parameter* p : params) out.push_back(p->value);
    return out;
}

void restore(const ParamRefs& params, const std::vector<Tensor>& values) {
    if (values.size() != params.size()) throw ContractError("restore: snapshot does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

void zero_grads(const ParamRefs& params) {
    for (auto* p : params) p->zero_grad();
}

std::size_t parameter_count(const ParamRefs& params) {
    std::size_t n = 0;
    for (auto* p : params) n += p->value.size();
    return n;
}

} // namespace hflow::num
