#include "hflow/numerics/unet.hpp"

#include "hflow/numerics/error.hpp"

#include <cmath>

namespace hflow::num {

namespace {

void init_conv(Conv2d& conv, Rng& rng, double gain) {
    const double fan_in = static_cast<double>(conv.weight.value.dim(1) * conv.weight.value.dim(2) *
                                              conv.weight.value.dim(3));
    const double sd = gain / std::sqrt(fan_in);
    for (double& v : conv.weight.value.storage()) v = rng.normal(0.0, sd);
}

} // namespace

UNet::UNet(const std::string& name, UNetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    if (cfg_.widths.empty()) throw ContractError("UNet " + name + ": needs at least one scale");
    if (cfg_.convs_per_block < 1) throw ContractError("UNet " + name + ": convs_per_block must be >= 1");
    const std::size_t S = cfg_.widths.size();
    const auto& w = cfg_.widths;

    auto make_unit = [&](const std::string& unit_name, bool act, std::size_t in, std::size_t out, int stride,
                         bool norm) {
        Unit u;
        u.activation = act;
        u.conv = Conv2d(unit_name, act ? 2 * in : in, out, 3, stride);
        init_conv(u.conv, rng, cfg_.init_gain);
        u.normalize = norm;
        if (norm) u.affine = ChannelAffine(unit_name + ".norm", out);
        return u;
    };

    enc_.resize(S);
    dec_.resize(S);
    for (std::size_t s = 0; s < S; ++s) {
        const std::string p = name + ".enc" + std::to_string(s);
        if (s == 0)
            enc_[0].push_back(make_unit(p + ".0", false, cfg_.in_channels, w[0], 1, cfg_.normalize));
        else
            enc_[s].push_back(make_unit(p + ".0", true, w[s - 1], w[s], 2, cfg_.normalize));
        for (std::size_t k = 1; k < cfg_.convs_per_block; ++k)
            enc_[s].push_back(make_unit(p + "." + std::to_string(k), true, w[s], w[s], 1, cfg_.normalize));
    }
    for (std::size_t s = 1; s < S; ++s) {
        const std::string p = name + ".dec" + std::to_string(s);
        dec_[s].push_back(make_unit(p + ".0", true, w[s], w[s - 1], 1, cfg_.normalize));
        for (std::size_t k = 1; k < cfg_.convs_per_block; ++k)
            dec_[s].push_back(make_unit(p + "." + std::to_string(k), true, w[s - 1], w[s - 1], 1, cfg_.normalize));
    }
    head_ = make_unit(name + ".head", true, w[0], cfg_.out_channels, 1, false);
    if (cfg_.zero_head) head_.conv.weight.value.fill(0.0);
}

std::size_t UNet::scales_for(std::size_t h, std::size_t w) const {
    std::size_t s = 1;
    while (s < cfg_.widths.size() && h % (std::size_t{1} << s) == 0 && w % (std::size_t{1} << s) == 0) ++s;
    return s;
}

Tensor UNet::run_unit(const Unit& u, const Tensor& x, Cache* cache) const {
    Tensor a = u.activation ? celu2(x) : x;
    Tensor c = u.conv.forward(a);
    Tensor y = u.normalize ? u.affine.forward(c) : c;
    if (cache) {
        UnitCache uc;
        if (u.activation) uc.input = x;
        uc.activated = std::move(a);
        uc.conv_out = u.normalize ? std::move(c) : Tensor{};
        cache->units.push_back(std::move(uc));
    }
    return y;
}

Tensor UNet::unit_backward(Unit& u, const UnitCache& c, const Tensor& gy, bool want_params) {
    Tensor g = u.normalize ? u.affine.backward(c.conv_out, gy, want_params) : gy;
    g = u.conv.backward(c.activated, g, true, want_params);
    return u.activation ? celu2_backward(c.input, g) : g;
}

Tensor UNet::forward(const Tensor& x, Cache* cache) const {
    require_rank(x, 4, "UNet input");
    if (x.c() != cfg_.in_channels)
        throw ContractError("UNet: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                            shape_string(x.shape()));
    const std::size_t S = scales_for(x.h(), x.w());
    if (cache) {
        cache->units.clear();
        cache->scales = S;
    }
    std::vector<Tensor> e(S);
    Tensor h = x;
    for (std::size_t s = 0; s < S; ++s) {
        for (const auto& u : enc_[s]) h = run_unit(u, h, cache);
        e[s] = h;
    }
    if (cache) cache->bottleneck = e[S - 1];
    Tensor u = std::move(h);
    for (std::size_t s = S - 1; s >= 1; --s) {
        Tensor t = upsample2(run_unit(dec_[s][0], u, cache));
        t += e[s - 1];
        u = std::move(t);
        for (std::size_t k = 1; k < dec_[s].size(); ++k) u = run_unit(dec_[s][k], u, cache);
    }
    return run_unit(head_, u, cache);
}

Tensor UNet::backward(const Cache& cache, const Tensor& gy, bool want_params, const Tensor* g_bottleneck) {
    const std::size_t S = cache.scales;
    std::size_t idx = cache.units.size();
    auto next = [&]() -> const UnitCache& {
        if (idx == 0) throw ContractError("UNet::backward: cache exhausted");
        return cache.units[--idx];
    };

    std::vector<Tensor> ge(S);
    auto accumulate = [&](std::size_t s, const Tensor& g) {
        if (ge[s].size() == 0)
            ge[s] = g;
        else
            ge[s] += g;
    };

    Tensor g = unit_backward(head_, next(), gy, want_params);
    for (std::size_t s = 1; s < S; ++s) {
        for (std::size_t k = dec_[s].size(); k-- > 1;) g = unit_backward(dec_[s][k], next(), g, want_params);
        accumulate(s - 1, g);
        g = unit_backward(dec_[s][0], next(), upsample2_backward(g), want_params);
    }
    accumulate(S - 1, g);
    if (g_bottleneck) accumulate(S - 1, *g_bottleneck);

    for (std::size_t s = S; s-- > 0;) {
        g = ge[s];
        for (std::size_t k = enc_[s].size(); k-- > 0;) g = unit_backward(enc_[s][k], next(), g, want_params);
        if (s > 0) accumulate(s - 1, g);
    }
    return g;
}

void UNet::collect(ParamRefs& out) {
    auto add = [&](Unit& u) {
        u.conv.collect(out);
        if (u.normalize) u.affine.collect(out);
    };
    for (auto& level : enc_)
        for (auto& u : level) add(u);
    for (auto& level : dec_)
        for (auto& u : level) add(u);
    add(head_);
}

} // namespace hflow::num
