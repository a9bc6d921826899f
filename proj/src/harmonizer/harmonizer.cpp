#include "hflow/harmonizer/harmonizer.hpp"

#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"

#include <cmath>
#include <limits>

namespace hflow::harm {

namespace {

constexpr double kScale = 255.0;

} // namespace

const char* variant_name(Variant v) { return v == Variant::UNet ? "unet" : "affine-head"; }

Variant variant_from_name(const std::string& name) {
    if (name == "unet") return Variant::UNet;
    if (name == "affine-head") return Variant::AffineHead;
    throw ContractError("unknown harmonizer variant '" + name + "' (expected unet or affine-head)");
}

Harmonizer::Harmonizer(HarmonizerConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.widths.empty()) throw ContractError("harmonizer: needs at least one scale");
    num::Rng rng(cfg_.init_seed);
    num::UNetConfig u;
    u.in_channels = 1;
    u.out_channels = 1;
    u.widths = cfg_.widths;
    u.convs_per_block = cfg_.convs_per_block;
    u.normalize = false;
    u.zero_head = true;
    net_ = num::UNet("harm", u, rng);
    if (cfg_.variant == Variant::AffineHead) {
        alpha_w_ = num::Parameter("harm.alpha.w", Tensor({cfg_.widths.back()}));
        alpha_b_ = num::Parameter("harm.alpha.b", Tensor({1}));
    }
}

Tensor Harmonizer::forward(const Tensor& x, Cache* cache) const {
    num::require_rank(x, 4, "harmonizer input");
    const std::size_t m = required_multiple();
    if (x.h() % m != 0 || x.w() % m != 0) {
        const auto pad = [m](std::size_t v) { return (m - v % m) % m; };
        throw ContractError("harmonizer: " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                            " input is not divisible by " + std::to_string(m) + "; pad by " +
                            std::to_string(pad(x.h())) + " rows and " + std::to_string(pad(x.w())) + " columns");
    }
    Tensor xn = x;
    for (double& v : xn.storage()) v /= kScale;
    num::UNet::Cache local;
    num::UNet::Cache* nc = cache ? &cache->net : (cfg_.variant == Variant::AffineHead ? &local : nullptr);
    Tensor out = net_.forward(xn, nc);
    const std::size_t n = x.n(), item = x.size() / std::max<std::size_t>(n, 1);
    if (cfg_.variant == Variant::UNet) {
        out += xn;
    } else {
        const Tensor& bn = nc->bottleneck;
        const std::size_t k = bn.c(), plane = bn.plane();
        Tensor pooled({n, k});
        std::vector<double> alpha(n);
        for (std::size_t b = 0; b < n; ++b) {
            double a = 1.0 + alpha_b_.value[0];
            for (std::size_t c = 0; c < k; ++c) {
                const double* p = bn.plane_ptr(b, c);
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
                pooled[b * k + c] = s / static_cast<double>(plane);
                a += alpha_w_.value[c] * pooled[b * k + c];
            }
            alpha[b] = a;
            for (std::size_t i = 0; i < item; ++i) out[b * item + i] += a * xn[b * item + i];
        }
        if (cache) {
            cache->pooled = std::move(pooled);
            cache->alpha = std::move(alpha);
        }
    }
    if (cache) cache->xn = std::move(xn);
    out *= kScale;
    if (!out.all_finite()) throw NumericError("harmonizer: non-finite output");
    return out;
}

Tensor Harmonizer::backward(const Cache& cache, const Tensor& gy, bool want_params, bool want_input) {
    num::require_same_shape(cache.xn, gy, "harmonizer backward");
    Tensor g = gy;
    g *= kScale; // d/d(normalised output)
    const std::size_t n = gy.n(), item = gy.size() / std::max<std::size_t>(n, 1);
    Tensor gx;
    if (cfg_.variant == Variant::UNet) {
        gx = net_.backward(cache.net, g, want_params);
        gx += g;
    } else {
        const Tensor& bn = cache.net.bottleneck;
        const std::size_t k = bn.c(), plane = bn.plane();
        Tensor gbn = Tensor::zeros_like(bn);
        for (std::size_t b = 0; b < n; ++b) {
            double galpha = 0.0;
            for (std::size_t i = 0; i < item; ++i) galpha += g[b * item + i] * cache.xn[b * item + i];
            if (want_params) {
                alpha_b_.grad[0] += galpha;
                for (std::size_t c = 0; c < k; ++c) alpha_w_.grad[c] += galpha * cache.pooled[b * k + c];
            }
            for (std::size_t c = 0; c < k; ++c) {
                const double v = galpha * alpha_w_.value[c] / static_cast<double>(plane);
                double* p = gbn.plane_ptr(b, c);
                for (std::size_t i = 0; i < plane; ++i) p[i] = v;
            }
        }
        gx = net_.backward(cache.net, g, want_params, &gbn);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < item; ++i) gx[b * item + i] += cache.alpha[b] * g[b * item + i];
    }
    if (!want_input) return {};
    gx *= 1.0 / kScale;
    return gx;
}

num::ParamRefs Harmonizer::params() {
    num::ParamRefs out;
    net_.collect(out);
    if (cfg_.variant == Variant::AffineHead) {
        out.push_back(&alpha_w_);
        out.push_back(&alpha_b_);
    }
    return out;
}

num::TensorArchive Harmonizer::to_archive() const {
    num::TensorArchive ar;
    num::put_scalar(ar, "meta.variant", cfg_.variant == Variant::UNet ? 0.0 : 1.0);
    num::put_scalar(ar, "meta.convs_per_block", static_cast<double>(cfg_.convs_per_block));
    Tensor w({cfg_.widths.size()});
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) w[i] = static_cast<double>(cfg_.widths[i]);
    ar.emplace_back("meta.widths", w);
    num::append_params(ar, const_cast<Harmonizer*>(this)->params());
    return ar;
}

Harmonizer Harmonizer::from_archive(const num::TensorArchive& ar) {
    HarmonizerConfig cfg;
    cfg.variant = num::get_scalar(ar, "meta.variant") == 0.0 ? Variant::UNet : Variant::AffineHead;
    cfg.convs_per_block = static_cast<std::size_t>(num::get_scalar(ar, "meta.convs_per_block"));
    cfg.widths.clear();
    for (double v : num::find_tensor(ar, "meta.widths").values()) cfg.widths.push_back(static_cast<std::size_t>(v));
    Harmonizer h(cfg);
    num::load_params(ar, h.params());
    return h;
}

void Harmonizer::save(const std::filesystem::path& path) const { num::write_archive(path, to_archive()); }

Harmonizer Harmonizer::load(const std::filesystem::path& path) { return from_archive(num::read_archive(path)); }

Tensor harmonize(const Harmonizer& h, const Tensor& x, std::size_t chunk) {
    std::vector<Tensor> parts;
    for (std::size_t b = 0; b < x.n(); b += chunk)
        parts.push_back(h.forward(num::slice_batch(x, b, std::min(x.n(), b + chunk))));
    return num::concat_batch(parts);
}

std::vector<double> gaussian_window(const SsimConfig& cfg) {
    if (cfg.window % 2 == 0) throw ContractError("ssim: window size must be odd");
    const std::size_t k = cfg.window;
    const double c = static_cast<double>(k / 2);
    std::vector<double> g(k);
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double d = static_cast<double>(i) - c;
        g[i] = std::exp(-d * d / (2.0 * cfg.sigma * cfg.sigma));
        s += g[i];
    }
    std::vector<double> w(k * k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) w[i * k + j] = g[i] * g[j] / (s * s);
    return w;
}

double ssim(const Tensor& x, const Tensor& y, const SsimConfig& cfg, Tensor* grad_x) {
    num::require_same_shape(x, y, "ssim");
    num::require_rank(x, 4, "ssim");
    if (x.n() != 1 || x.c() != 1) throw ContractError("ssim: expects a single 1-channel image pair");
    const std::size_t H = x.h(), W = x.w(), K = cfg.window;
    if (H < K || W < K)
        throw ContractError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than the " +
                            std::to_string(K) + "x" + std::to_string(K) + " window");
    const std::vector<double> win = gaussian_window(cfg);
    const double C1 = std::pow(cfg.k1 * cfg.dynamic_range, 2);
    const double C2 = std::pow(cfg.k2 * cfg.dynamic_range, 2);
    const double* xp = x.data();
    const double* yp = y.data();
    if (grad_x) *grad_x = Tensor::zeros_like(x);
    const std::size_t PH = H - K + 1, PW = W - K + 1;
    const double count = static_cast<double>(PH * PW);
    double total = 0.0;
    for (std::size_t i = 0; i < PH; ++i)
        for (std::size_t j = 0; j < PW; ++j) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (std::size_t a = 0; a < K; ++a) {
                const double* xr = xp + (i + a) * W + j;
                const double* yr = yp + (i + a) * W + j;
                const double* wr = win.data() + a * K;
                for (std::size_t b = 0; b < K; ++b) {
                    const double w = wr[b];
                    mx += w * xr[b];
                    my += w * yr[b];
                    sxx += w * xr[b] * xr[b];
                    syy += w * yr[b] * yr[b];
                    sxy += w * (xr[b] * yr[b]); // grouped so that ssim(x, y) == ssim(y, x) bit for bit
                }
            }
            const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
            const double A = 2 * (mx * my) + C1, B = 2 * cxy + C2;
            const double C = mx * mx + my * my + C1, D = vx + vy + C2;
            const double s = (A * B) / (C * D);
            total += s;
            if (!grad_x) continue;
            const double d_mx = 2 * my * B / (C * D) - s * 2 * mx / C;
            const double d_vx = -s / D;
            const double d_cxy = 2 * A / (C * D);
            double* g = grad_x->data();
            for (std::size_t a = 0; a < K; ++a)
                for (std::size_t b = 0; b < K; ++b) {
                    const std::size_t p = (i + a) * W + j + b;
                    const double w = win[a * K + b];
                    g[p] += w * (d_mx + 2 * (xp[p] - mx) * d_vx + (yp[p] - my) * d_cxy) / count;
                }
        }
    return total / count;
}

double mean_l1(const Tensor& a, const Tensor& b) {
    num::require_same_shape(a, b, "mean_l1");
    if (a.size() == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

double reconstruction_loss(const Tensor& pred, const Tensor& target, Tensor* grad_pred, const SsimConfig& cfg) {
    num::require_same_shape(pred, target, "reconstruction_loss");
    num::require_rank(pred, 4, "reconstruction_loss");
    const std::size_t n = pred.n(), item = pred.size() / std::max<std::size_t>(n, 1);
    if (n == 0) throw ContractError("reconstruction_loss: empty batch");
    if (grad_pred) *grad_pred = Tensor::zeros_like(pred);
    double total = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
        const Tensor p = num::slice_batch(pred, b, b + 1), t = num::slice_batch(target, b, b + 1);
        double l1 = 0.0;
        for (std::size_t i = 0; i < item; ++i) l1 += std::abs(p[i] - t[i]);
        l1 /= kScale * static_cast<double>(item);
        Tensor gs;
        const double s = ssim(p, t, cfg, grad_pred ? &gs : nullptr);
        total += l1 + (1.0 - s);
        if (!grad_pred) continue;
        double* g = grad_pred->data() + b * item;
        const double l1_unit = 1.0 / (kScale * static_cast<double>(item));
        for (std::size_t i = 0; i < item; ++i) {
            const double d = p[i] - t[i];
            const double sign = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
            g[i] = (sign * l1_unit - gs[i]) / static_cast<double>(n);
        }
    }
    return total / static_cast<double>(n);
}

PretrainResult pretrain(Harmonizer& h, const Tensor& train, const Tensor& val, const PretrainConfig& cfg,
                        const std::function<void(const PretrainPoint&)>& on_log) {
    num::require_rank(train, 4, "pretrain");
    if (train.n() == 0) throw ContractError("pretrain: empty training set");
    if (val.n() == 0) throw ContractError("pretrain: empty validation set");
    if (cfg.batch == 0) throw ContractError("pretrain: batch size must be positive");
    cfg.augment.validate();

    PretrainResult result;
    const num::ParamRefs params = h.params();
    num::AdamState adam(cfg.adam);
    const Tensor val_aug = aug::apply(cfg.augment, val, kValAugmentSeed);
    const auto val_loss = [&] { return reconstruction_loss(harmonize(h, val_aug), val); };

    std::vector<Tensor> best = num::snapshot(params);
    result.best_val_loss = val_loss();
    result.best_step = 0;
    const std::size_t every = std::max<std::size_t>(cfg.val_every, 1);

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        num::Rng rng(num::derive_seed(cfg.seed, it));
        std::vector<std::size_t> idx(cfg.batch);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.n()) - 1));
        const Tensor x = num::gather_batch(train, idx);
        const Tensor xa = aug::apply(cfg.augment, x, num::derive_seed(cfg.seed ^ 0x4a7, it));
        double loss = 0.0;
        try {
            num::zero_grads(params);
            Harmonizer::Cache cache;
            const Tensor y = h.forward(xa, &cache);
            Tensor gy;
            loss = reconstruction_loss(y, x, &gy);
            if (!std::isfinite(loss)) throw NumericError("pretrain: non-finite loss");
            h.backward(cache, gy, true);
            num::adam_step(params, adam);
        } catch (const NumericError& e) {
            result.diverged = true;
            result.message = "iteration " + std::to_string(it + 1) + ": " + e.what();
            break;
        }
        if ((it + 1) % every == 0 || it + 1 == cfg.iterations) {
            const double v = val_loss();
            PretrainPoint pt{it + 1, loss, v};
            result.curve.push_back(pt);
            if (on_log) on_log(pt);
            if (v < result.best_val_loss) {
                result.best_val_loss = v;
                result.best_step = it + 1;
                best = num::snapshot(params);
            }
        }
    }
    num::restore(params, best);
    return result;
}

} // namespace hflow::harm
