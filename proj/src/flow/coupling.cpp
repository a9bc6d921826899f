#include "hflow/flow/coupling.hpp"

#include "hflow/numerics/error.hpp"

#include <cmath>

namespace hflow::flow {

using num::Parameter;

const char* mask_kind_name(MaskKind k) { return k == MaskKind::Checkerboard ? "checkerboard" : "channel"; }
const char* mask_phase_name(MaskPhase p) { return p == MaskPhase::AFirst ? "a-first" : "b-first"; }

CouplingLayer::CouplingLayer(std::string name, MaskKind kind, MaskPhase phase, std::size_t channels,
                             std::size_t cond_channels, const std::vector<std::size_t>& widths, num::Rng& rng)
    : name_(std::move(name)), kind_(kind), phase_(phase), channels_(channels), cond_channels_(cond_channels) {
    if (channels == 0) throw ContractError("coupling " + name_ + ": zero channels");
    std::size_t in = 0;
    if (kind == MaskKind::Checkerboard) {
        a_begin_ = 0;
        a_count_ = channels;
        b_begin_ = 0;
        b_count_ = channels;
        in = channels + 1; // masked z plus the mask itself
    } else {
        const std::size_t half = channels / 2;
        if (phase == MaskPhase::AFirst) {
            a_begin_ = 0;
            a_count_ = half;
            b_begin_ = half;
            b_count_ = channels - half;
        } else {
            b_begin_ = 0;
            b_count_ = half;
            a_begin_ = half;
            a_count_ = channels - half;
        }
        if (b_count_ == 0) throw ContractError("coupling " + name_ + ": channel mask leaves nothing to transform");
        in = a_count_;
    }
    in += cond_channels;
    num::UNetConfig cfg;
    cfg.in_channels = in == 0 ? 1 : in; // an empty A partition feeds a constant zero plane
    cfg.out_channels = 2 * b_count_;
    cfg.widths = widths;
    cfg.normalize = true;
    cfg.zero_head = true;
    subnet_ = num::UNet(name_ + ".net", cfg, rng);
    scale_ = Parameter(name_ + ".scale", Tensor({b_count_}, 1.0));
}

num::Parameter& CouplingLayer::head_bias() { return subnet_.head_conv().bias; }
num::Parameter& CouplingLayer::head_weight() { return subnet_.head_conv().weight; }

bool CouplingLayer::transformed(std::size_t c, std::size_t i, std::size_t j) const {
    if (kind_ == MaskKind::Checkerboard) {
        const bool even = (i + j) % 2 == 0;
        return phase_ == MaskPhase::AFirst ? !even : even;
    }
    return c >= b_begin_ && c < b_begin_ + b_count_;
}

Tensor CouplingLayer::make_input(const Tensor& z, const Tensor* cond) const {
    num::require_rank(z, 4, "coupling forward");
    if (z.c() != channels_)
        throw ContractError("coupling " + name_ + ": expected " + std::to_string(channels_) + " channels, got " +
                            std::to_string(z.c()));
    if (cond_channels_ > 0) {
        if (!cond) throw ContractError("coupling " + name_ + ": conditioning input required");
        if (cond->n() != z.n() || cond->c() != cond_channels_ || cond->h() != z.h() || cond->w() != z.w())
            throw ContractError("coupling " + name_ + ": conditioning shape " + num::shape_string(cond->shape()) +
                                " does not match " + num::shape_string(z.shape()));
    }
    const std::size_t n = z.n(), h = z.h(), w = z.w();
    Tensor in;
    if (kind_ == MaskKind::Checkerboard) {
        in = Tensor::nchw(n, channels_ + 1, h, w);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const bool keep = !transformed(0, i, j);
                    for (std::size_t c = 0; c < channels_; ++c) in.at(b, c, i, j) = keep ? z.at(b, c, i, j) : 0.0;
                    in.at(b, channels_, i, j) = keep ? 1.0 : 0.0;
                }
    } else if (a_count_ > 0) {
        in = num::slice_channels(z, a_begin_, a_begin_ + a_count_);
    } else {
        in = Tensor::nchw(n, cond_channels_ > 0 ? 0 : 1, h, w);
    }
    if (cond_channels_ > 0) in = in.c() == 0 ? *cond : num::concat_channels(in, *cond);
    return in;
}

CouplingLayer::Coeffs CouplingLayer::coefficients(const Tensor& net_out, const Tensor& like) const {
    if (!net_out.all_finite()) throw NumericError("coupling " + name_ + ": non-finite subnet output");
    const std::size_t n = like.n(), h = like.h(), w = like.w(), hw = h * w;
    Coeffs k;
    k.tanh_raw = Tensor::nchw(n, b_count_, h, w);
    k.s_full = Tensor::zeros_like(like);
    k.t_full = Tensor::zeros_like(like);
    const double* f = scale_.value.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t q = 0; q < b_count_; ++q) {
            const std::size_t c = b_begin_ + q;
            const double* raw = net_out.plane_ptr(b, q);
            const double* sh = net_out.plane_ptr(b, b_count_ + q);
            double* th = k.tanh_raw.plane_ptr(b, q);
            double* s = k.s_full.plane_ptr(b, c);
            double* t = k.t_full.plane_ptr(b, c);
            for (std::size_t p = 0; p < hw; ++p) {
                th[p] = std::tanh(raw[p]);
                if (!transformed(c, p / w, p % w)) continue;
                s[p] = f[q] * th[p];
                t[p] = sh[p];
            }
        }
    return k;
}

Tensor CouplingLayer::forward(const Tensor& z, std::vector<double>& logdet, Cache* cache, const Tensor* cond) const {
    Tensor in = make_input(z, cond);
    num::UNet::Cache net_cache;
    const Tensor out = subnet_.forward(in, cache ? &net_cache : nullptr);
    Coeffs k = coefficients(out, z);
    const std::size_t n = z.n(), item = z.size() / std::max<std::size_t>(n, 1);
    if (logdet.empty()) logdet.assign(n, 0.0);
    if (logdet.size() != n) throw ContractError("coupling " + name_ + ": logdet size does not match batch");
    Tensor y = z;
    for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = b * item;
        double ld = 0.0;
        for (std::size_t i = 0; i < item; ++i) {
            const double s = k.s_full[off + i];
            y[off + i] = z[off + i] * std::exp(s) + k.t_full[off + i];
            ld += s;
        }
        logdet[b] += ld;
    }
    if (!y.all_finite()) throw NumericError("coupling " + name_ + ": non-finite output");
    if (cache) {
        cache->z = z;
        cache->cond = cond ? *cond : Tensor();
        cache->net_in = std::move(in);
        cache->net = std::move(net_cache);
        cache->tanh_raw = std::move(k.tanh_raw);
        cache->s_full = std::move(k.s_full);
        cache->t_full = std::move(k.t_full);
    }
    return y;
}

Tensor CouplingLayer::inverse(const Tensor& y, const Tensor* cond) const {
    // The subnet only sees the untouched partition, so evaluating it on y
    // gives the same coefficients as the forward pass saw.
    const Tensor out = subnet_.forward(make_input(y, cond));
    const Coeffs k = coefficients(out, y);
    Tensor z = y;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (y[i] - k.t_full[i]) * std::exp(-k.s_full[i]);
    return z;
}

Tensor CouplingLayer::backward(const Cache& cache, const Tensor& gy, std::span<const double> glogdet, bool want_params,
                               Tensor* gcond) {
    const Tensor& z = cache.z;
    num::require_same_shape(z, gy, "coupling backward");
    const std::size_t n = z.n(), h = z.h(), w = z.w(), hw = h * w;
    if (glogdet.size() != n) throw ContractError("coupling " + name_ + ": glogdet size does not match batch");

    Tensor gz = Tensor::zeros_like(z);
    Tensor gnet = Tensor::nchw(n, 2 * b_count_, h, w);
    const double* f = scale_.value.data();
    double* gf = scale_.grad.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < channels_; ++c) {
            const double* zp = z.plane_ptr(b, c);
            const double* gyp = gy.plane_ptr(b, c);
            const double* sp = cache.s_full.plane_ptr(b, c);
            double* gzp = gz.plane_ptr(b, c);
            const bool in_b = c >= b_begin_ && c < b_begin_ + b_count_;
            const std::size_t q = c - b_begin_;
            for (std::size_t p = 0; p < hw; ++p) {
                if (!in_b || !transformed(c, p / w, p % w)) {
                    gzp[p] = gyp[p];
                    continue;
                }
                const double e = std::exp(sp[p]);
                gzp[p] = gyp[p] * e;
                const double gs = gyp[p] * zp[p] * e + glogdet[b];
                const double th = cache.tanh_raw.plane_ptr(b, q)[p];
                gnet.plane_ptr(b, q)[p] = gs * f[q] * (1.0 - th * th);
                gnet.plane_ptr(b, b_count_ + q)[p] = gyp[p];
                if (want_params) gf[q] += gs * th;
            }
        }

    const Tensor gin = subnet_.backward(cache.net, gnet, want_params);
    std::size_t cond_begin = 0;
    if (kind_ == MaskKind::Checkerboard) {
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < channels_; ++c) {
                const double* gp = gin.plane_ptr(b, c);
                double* gzp = gz.plane_ptr(b, c);
                for (std::size_t p = 0; p < hw; ++p)
                    if (!transformed(c, p / w, p % w)) gzp[p] += gp[p];
            }
        cond_begin = channels_ + 1;
    } else if (a_count_ > 0) {
        num::add_into_channels(gz, num::slice_channels(gin, 0, a_count_), a_begin_);
        cond_begin = a_count_;
    } else {
        cond_begin = cond_channels_ > 0 ? 0 : 1;
    }
    if (gcond && cond_channels_ > 0) *gcond = num::slice_channels(gin, cond_begin, cond_begin + cond_channels_);
    return gz;
}

void CouplingLayer::collect(num::ParamRefs& out) {
    subnet_.collect(out);
    out.push_back(&scale_);
}

Tensor squeeze(const Tensor& x) {
    num::require_rank(x, 4, "squeeze");
    if (x.h() % 2 != 0 || x.w() % 2 != 0)
        throw ContractError("squeeze: spatial extent " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                            " is not even");
    const std::size_t n = x.n(), c = x.c(), h = x.h() / 2, w = x.w() / 2;
    Tensor y = Tensor::nchw(n, 4 * c, h, w);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t di = 0; di < 2; ++di)
                for (std::size_t dj = 0; dj < 2; ++dj)
                    for (std::size_t i = 0; i < h; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            y.at(b, 4 * ch + 2 * di + dj, i, j) = x.at(b, ch, 2 * i + di, 2 * j + dj);
    return y;
}

Tensor unsqueeze(const Tensor& x) {
    num::require_rank(x, 4, "unsqueeze");
    if (x.c() % 4 != 0) throw ContractError("unsqueeze: channel count " + std::to_string(x.c()) + " not divisible by 4");
    const std::size_t n = x.n(), c = x.c() / 4, h = x.h(), w = x.w();
    Tensor y = Tensor::nchw(n, c, 2 * h, 2 * w);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t di = 0; di < 2; ++di)
                for (std::size_t dj = 0; dj < 2; ++dj)
                    for (std::size_t i = 0; i < h; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            y.at(b, ch, 2 * i + di, 2 * j + dj) = x.at(b, 4 * ch + 2 * di + dj, i, j);
    return y;
}

} // namespace hflow::flow
