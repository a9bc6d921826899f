#include "hflow/flow/flow_model.hpp"

#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hflow::flow {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178; // 0.5 * ln(2 pi)

double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
double sigmoid(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }
// log sigmoid'(v) = log sigmoid(v) + log sigmoid(-v)
double log_dsigmoid(double v) { return -softplus(-v) - softplus(v); }

std::size_t item_size(const Tensor& t) { return t.n() == 0 ? 0 : t.size() / t.n(); }

int step_code(const StepSpec& s) {
    if (s.squeeze) return 0;
    return 1 + 2 * static_cast<int>(s.mask) + static_cast<int>(s.phase);
}

StepSpec step_from_code(int code) {
    if (code < 0 || code > 4) throw ContractError("flow checkpoint: bad step code " + std::to_string(code));
    StepSpec s;
    if (code == 0) {
        s.squeeze = true;
        return s;
    }
    s.mask = static_cast<MaskKind>((code - 1) / 2);
    s.phase = static_cast<MaskPhase>((code - 1) % 2);
    return s;
}

Tensor vector_tensor(const std::vector<std::size_t>& v) {
    Tensor t({v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<double>(v[i]);
    return t;
}

std::vector<std::size_t> tensor_vector(const Tensor& t) {
    std::vector<std::size_t> v;
    for (double x : t.values()) v.push_back(static_cast<std::size_t>(x));
    return v;
}

} // namespace

const char* dequant_name(DequantMode m) { return m == DequantMode::Uniform ? "uniform" : "variational"; }

DequantMode dequant_from_name(const std::string& name) {
    if (name == "uniform") return DequantMode::Uniform;
    if (name == "variational") return DequantMode::Variational;
    throw ContractError("unknown dequantisation mode '" + name + "' (expected uniform or variational)");
}

const char* preprocess_name(Preprocess p) { return p == Preprocess::Logit ? "logit" : "linear"; }

Preprocess preprocess_from_name(const std::string& name) {
    if (name == "logit") return Preprocess::Logit;
    if (name == "linear") return Preprocess::Linear;
    throw ContractError("unknown flow preprocessing '" + name + "' (expected logit or linear)");
}

std::vector<StepSpec> standard_steps(std::size_t depth) {
    if (depth == 0 || depth % 3 != 0)
        throw ContractError("flow depth " + std::to_string(depth) + " must be a positive multiple of 3");
    const std::size_t per = depth / 3;
    std::vector<StepSpec> steps;
    for (std::size_t stage = 0; stage < 3; ++stage) {
        if (stage > 0) steps.push_back({true, MaskKind::Checkerboard, MaskPhase::AFirst});
        const MaskKind kind = stage == 0 ? MaskKind::Checkerboard : MaskKind::Channel;
        for (std::size_t k = 0; k < per; ++k)
            steps.push_back({false, kind, k % 2 == 0 ? MaskPhase::AFirst : MaskPhase::BFirst});
    }
    return steps;
}

FlowModel::FlowModel(FlowConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.steps.empty() && cfg_.depth > 0) cfg_.steps = standard_steps(cfg_.depth);
    if (!(cfg_.logit_alpha > 0.0 && cfg_.logit_alpha < 0.5)) throw ContractError("flow: logit alpha must be in (0, 0.5)");
    if (cfg_.channels == 0 || cfg_.height == 0 || cfg_.width == 0) throw ContractError("flow: empty image shape");
    num::Rng rng(cfg_.init_seed);
    std::size_t c = cfg_.channels, h = cfg_.height, w = cfg_.width, k = 0;
    cfg_.depth = 0;
    for (const StepSpec& s : cfg_.steps) {
        Step step;
        step.squeeze = s.squeeze;
        if (s.squeeze) {
            if (h % 2 || w % 2)
                throw ContractError("flow: cannot squeeze " + std::to_string(h) + "x" + std::to_string(w) +
                                    " (odd extent)");
            c *= 4;
            h /= 2;
            w /= 2;
        } else {
            step.layer = CouplingLayer("flow." + std::to_string(k++), s.mask, s.phase, c, 0, cfg_.subnet_widths, rng);
            ++cfg_.depth;
        }
        steps_.push_back(std::move(step));
    }
    if (cfg_.dequant == DequantMode::Variational) {
        for (std::size_t i = 0; i < cfg_.dequant_layers; ++i)
            dequant_.emplace_back("dequant." + std::to_string(i), MaskKind::Checkerboard,
                                  i % 2 == 0 ? MaskPhase::AFirst : MaskPhase::BFirst, cfg_.channels, cfg_.channels,
                                  cfg_.dequant_widths, rng);
    }
}

std::size_t FlowModel::coupling_count() const { return cfg_.depth; }

CouplingLayer& FlowModel::coupling(std::size_t k) {
    return const_cast<CouplingLayer&>(static_cast<const FlowModel&>(*this).coupling(k));
}

const CouplingLayer& FlowModel::coupling(std::size_t k) const {
    std::size_t seen = 0;
    for (const Step& s : steps_) {
        if (s.squeeze) continue;
        if (seen++ == k) return s.layer;
    }
    throw ContractError("flow: coupling index " + std::to_string(k) + " out of range");
}

num::Shape FlowModel::latent_shape(std::size_t n) const {
    std::size_t c = cfg_.channels, h = cfg_.height, w = cfg_.width;
    for (const Step& s : steps_)
        if (s.squeeze) {
            c *= 4;
            h /= 2;
            w /= 2;
        }
    return {n, c, h, w};
}

Tensor FlowModel::encode(const Tensor& v, std::vector<double>* logdet) const {
    std::vector<double> ld;
    Tensor z = v;
    for (const Step& s : steps_) z = s.squeeze ? squeeze(z) : s.layer.forward(z, ld);
    if (logdet) *logdet = ld.empty() ? std::vector<double>(v.n(), 0.0) : ld;
    return z;
}

Tensor FlowModel::decode(const Tensor& z) const {
    Tensor v = z;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) v = it->squeeze ? unsqueeze(v) : it->layer.inverse(v);
    return v;
}

std::vector<double> FlowModel::log_density(const Tensor& v, DensityCache* cache) const {
    num::require_rank(v, 4, "flow log_density");
    if (v.c() != cfg_.channels || v.h() != cfg_.height || v.w() != cfg_.width)
        throw ContractError("flow: input " + num::shape_string(v.shape()) + " does not match model image " +
                            std::to_string(cfg_.channels) + "x" + std::to_string(cfg_.height) + "x" +
                            std::to_string(cfg_.width));
    const std::size_t n = v.n();
    std::vector<double> out(n, 0.0);
    if (cache) {
        cache->layers.clear();
        cache->shapes.clear();
    }
    Tensor z = v;
    for (std::size_t i = 0; i < steps_.size(); ++i) {
        const Step& s = steps_[i];
        if (cache) cache->shapes.push_back(z.shape());
        if (s.squeeze) {
            z = squeeze(z);
        } else if (cache) {
            cache->layers.emplace_back();
            z = s.layer.forward(z, out, &cache->layers.back());
        } else {
            z = s.layer.forward(z, out);
        }
    }
    const std::size_t item = item_size(z);
    for (std::size_t b = 0; b < n; ++b) {
        double acc = 0.0;
        const double* p = z.data() + b * item;
        for (std::size_t i = 0; i < item; ++i) acc += p[i] * p[i];
        out[b] += -0.5 * acc - static_cast<double>(item) * kHalfLog2Pi;
    }
    if (cache) cache->z = std::move(z);
    return out;
}

Tensor FlowModel::log_density_backward(const DensityCache& cache, std::span<const double> weights, bool want_params) {
    const Tensor& z = cache.z;
    if (weights.size() != z.n()) throw ContractError("flow backward: weight count does not match batch");
    const std::size_t item = item_size(z);
    Tensor g = Tensor::zeros_like(z);
    for (std::size_t b = 0; b < z.n(); ++b)
        for (std::size_t i = 0; i < item; ++i) g[b * item + i] = -weights[b] * z[b * item + i];
    std::size_t layer = cache.layers.size();
    for (std::size_t i = steps_.size(); i-- > 0;) {
        Step& s = steps_[i];
        if (s.squeeze) {
            g = unsqueeze(g);
        } else {
            g = s.layer.backward(cache.layers[--layer], g, weights, want_params);
        }
    }
    return g;
}

std::vector<double> FlowModel::log_prob_continuous(const Tensor& c, ContinuousCache* cache) const {
    num::require_rank(c, 4, "flow log_prob_continuous");
    const double a = cfg_.logit_alpha;
    const bool logit = cfg_.preprocess == Preprocess::Logit;
    const double k = (1.0 - 2.0 * a) / 256.0;
    const double log_k = std::log(k);
    const double span = std::log((1.0 - a) / a); // linear: v in [-span, span]
    Tensor p = Tensor::zeros_like(c);
    Tensor v = Tensor::zeros_like(c);
    std::vector<std::uint8_t> clamped(c.size(), 0);
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (!std::isfinite(c[i])) throw NumericError("flow: non-finite intensity");
        double ci = c[i];
        if (ci < 0.0 || ci > 256.0) {
            ci = std::clamp(ci, 0.0, 256.0);
            clamped[i] = 1;
        }
        if (logit) {
            p[i] = a + k * ci;
            v[i] = std::log(p[i]) - std::log1p(-p[i]);
        } else {
            p[i] = ci / 256.0;
            v[i] = span * (2.0 * p[i] - 1.0);
        }
    }
    std::vector<double> out = log_density(v, cache ? &cache->density : nullptr);
    const std::size_t item = item_size(c);
    for (std::size_t b = 0; b < c.n(); ++b) {
        double ld = 0.0;
        if (logit) {
            for (std::size_t i = 0; i < item; ++i) {
                const double pi = p[b * item + i];
                ld += log_k - std::log(pi) - std::log1p(-pi);
            }
        } else {
            ld = static_cast<double>(item) * std::log(2.0 * span / 256.0);
        }
        out[b] += ld;
    }
    if (cache) {
        cache->p = std::move(p);
        cache->clamped = std::move(clamped);
    }
    return out;
}

Tensor FlowModel::log_prob_continuous_backward(const ContinuousCache& cache, std::span<const double> weights,
                                               bool want_params) {
    const Tensor gv = log_density_backward(cache.density, weights, want_params);
    const double a = cfg_.logit_alpha;
    const double k = (1.0 - 2.0 * a) / 256.0;
    const double linear_k = 2.0 * std::log((1.0 - a) / a) / 256.0;
    const std::size_t item = item_size(gv);
    Tensor gc = Tensor::zeros_like(gv);
    for (std::size_t b = 0; b < gv.n(); ++b)
        for (std::size_t i = 0; i < item; ++i) {
            const std::size_t j = b * item + i;
            if (cache.clamped[j]) continue;
            if (cfg_.preprocess == Preprocess::Linear) {
                gc[j] = gv[j] * linear_k;
                continue;
            }
            const double p = cache.p[j];
            const double q = p * (1.0 - p);
            // dv/dc = k / q; d(log-det)/dc = k (2p - 1) / q
            gc[j] = (gv[j] + weights[b] * (2.0 * p - 1.0)) * k / q;
        }
    return gc;
}

std::vector<double> FlowModel::log_prob(const Tensor& x, std::uint64_t noise_seed, DiscreteCache* cache,
                                        std::size_t first_index) const {
    num::require_rank(x, 4, "flow log_prob");
    for (double v : x.values())
        if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v))
            throw ContractError("flow log_prob: intensity " + std::to_string(v) + " is not an integer level in [0, 255]");
    const std::size_t n = x.n(), item = item_size(x);
    Tensor c = x;
    std::vector<double> log_q(n, 0.0);
    if (cfg_.dequant == DequantMode::Uniform) {
        for (std::size_t b = 0; b < n; ++b) {
            num::Rng rng(num::derive_seed(noise_seed, first_index + b));
            for (std::size_t i = 0; i < item; ++i) c[b * item + i] += rng.uniform();
        }
    } else {
        Tensor eps = Tensor::zeros_like(x);
        for (std::size_t b = 0; b < n; ++b) {
            num::Rng rng(num::derive_seed(noise_seed, first_index + b));
            double acc = 0.0;
            for (std::size_t i = 0; i < item; ++i) {
                const double e = rng.normal();
                eps[b * item + i] = e;
                acc += e * e;
            }
            log_q[b] = -0.5 * acc - static_cast<double>(item) * kHalfLog2Pi;
        }
        Tensor cond = x;
        for (double& v : cond.storage()) v = v / 127.5 - 1.0;
        std::vector<double> ld(n, 0.0);
        Tensor vq = eps;
        if (cache) cache->dequant.assign(dequant_.size(), {});
        for (std::size_t i = 0; i < dequant_.size(); ++i)
            vq = dequant_[i].forward(vq, ld, cache ? &cache->dequant[i] : nullptr, &cond);
        for (std::size_t b = 0; b < n; ++b) {
            double ls = 0.0;
            for (std::size_t i = 0; i < item; ++i) {
                const double v = vq[b * item + i];
                // Keep u strictly inside [0, 1) so the cell of level x is respected.
                c[b * item + i] += std::min(sigmoid(v), std::nextafter(1.0, 0.0));
                ls += log_dsigmoid(v);
            }
            // log q(u | x) = log N(eps) - log|d vq / d eps| - log|du / dvq|
            log_q[b] -= ld[b] + ls;
        }
        if (cache) {
            cache->cond = std::move(cond);
            cache->vq = std::move(vq);
        }
    }
    std::vector<double> out = log_prob_continuous(c, cache ? &cache->cont : nullptr);
    for (std::size_t b = 0; b < n; ++b) out[b] -= log_q[b];
    return out;
}

void FlowModel::log_prob_backward(const DiscreteCache& cache, std::span<const double> weights) {
    const Tensor gc = log_prob_continuous_backward(cache.cont, weights, true);
    if (cfg_.dequant == DequantMode::Uniform) return;
    // Objective per sample: log p(x + sigmoid(vq)) + logdet_q + sum log sigmoid'(vq) (log N(eps) is constant).
    const Tensor& vq = cache.vq;
    const std::size_t item = item_size(vq);
    Tensor g = Tensor::zeros_like(vq);
    for (std::size_t b = 0; b < vq.n(); ++b)
        for (std::size_t i = 0; i < item; ++i) {
            const std::size_t j = b * item + i;
            const double s = sigmoid(vq[j]);
            g[j] = gc[j] * s * (1.0 - s) + weights[b] * (1.0 - 2.0 * s);
        }
    for (std::size_t i = dequant_.size(); i-- > 0;) g = dequant_[i].backward(cache.dequant[i], g, weights, true);
}

Tensor FlowModel::sample(std::size_t n, std::uint64_t seed) const {
    Tensor z(latent_shape(n));
    const std::size_t item = item_size(z);
    for (std::size_t b = 0; b < n; ++b) {
        num::Rng rng(num::derive_seed(seed, b));
        for (std::size_t i = 0; i < item; ++i) z[b * item + i] = rng.normal();
    }
    Tensor v = decode(z);
    const double a = cfg_.logit_alpha;
    const double span = std::log((1.0 - a) / a);
    for (double& x : v.storage()) {
        const double c = cfg_.preprocess == Preprocess::Logit ? 256.0 * (sigmoid(x) - a) / (1.0 - 2.0 * a)
                                                               : 128.0 * (x / span + 1.0);
        x = std::floor(std::clamp(c, 0.0, 255.0));
    }
    return v;
}

num::ParamRefs FlowModel::params() {
    num::ParamRefs out;
    for (Step& s : steps_)
        if (!s.squeeze) s.layer.collect(out);
    for (CouplingLayer& l : dequant_) l.collect(out);
    return out;
}

num::TensorArchive FlowModel::to_archive() const {
    num::TensorArchive ar;
    num::put_scalar(ar, "meta.channels", static_cast<double>(cfg_.channels));
    num::put_scalar(ar, "meta.height", static_cast<double>(cfg_.height));
    num::put_scalar(ar, "meta.width", static_cast<double>(cfg_.width));
    num::put_scalar(ar, "meta.dequant", cfg_.dequant == DequantMode::Uniform ? 0.0 : 1.0);
    num::put_scalar(ar, "meta.dequant_layers", static_cast<double>(cfg_.dequant_layers));
    num::put_scalar(ar, "meta.logit_alpha", cfg_.logit_alpha);
    num::put_scalar(ar, "meta.preprocess", cfg_.preprocess == Preprocess::Logit ? 0.0 : 1.0);
    num::put_scalar(ar, "meta.reference_bpd", reference_bpd);
    ar.emplace_back("meta.subnet_widths", vector_tensor(cfg_.subnet_widths));
    ar.emplace_back("meta.dequant_widths", vector_tensor(cfg_.dequant_widths));
    std::vector<std::size_t> codes;
    for (const StepSpec& s : cfg_.steps) codes.push_back(static_cast<std::size_t>(step_code(s)));
    ar.emplace_back("meta.steps", vector_tensor(codes));
    num::append_params(ar, const_cast<FlowModel*>(this)->params());
    return ar;
}

FlowModel FlowModel::from_archive(const num::TensorArchive& ar) {
    FlowConfig cfg;
    cfg.channels = static_cast<std::size_t>(num::get_scalar(ar, "meta.channels"));
    cfg.height = static_cast<std::size_t>(num::get_scalar(ar, "meta.height"));
    cfg.width = static_cast<std::size_t>(num::get_scalar(ar, "meta.width"));
    cfg.dequant = num::get_scalar(ar, "meta.dequant") == 0.0 ? DequantMode::Uniform : DequantMode::Variational;
    cfg.dequant_layers = static_cast<std::size_t>(num::get_scalar(ar, "meta.dequant_layers"));
    cfg.logit_alpha = num::get_scalar(ar, "meta.logit_alpha");
    cfg.preprocess = num::get_scalar(ar, "meta.preprocess") == 0.0 ? Preprocess::Logit : Preprocess::Linear;
    cfg.subnet_widths = tensor_vector(num::find_tensor(ar, "meta.subnet_widths"));
    cfg.dequant_widths = tensor_vector(num::find_tensor(ar, "meta.dequant_widths"));
    for (std::size_t code : tensor_vector(num::find_tensor(ar, "meta.steps")))
        cfg.steps.push_back(step_from_code(static_cast<int>(code)));
    FlowModel model(cfg);
    num::load_params(ar, model.params());
    model.reference_bpd = num::get_scalar(ar, "meta.reference_bpd");
    return model;
}

void FlowModel::save(const std::filesystem::path& path) const { num::write_archive(path, to_archive()); }

FlowModel FlowModel::load(const std::filesystem::path& path) { return from_archive(num::read_archive(path)); }

double bits_per_dim(double log_prob, std::size_t dims) {
    if (dims == 0) throw ContractError("bits_per_dim: zero dimensions");
    return -log_prob / (std::numbers::ln2 * static_cast<double>(dims));
}

std::vector<double> bits_per_dim(std::span<const double> log_prob, std::size_t dims) {
    std::vector<double> out;
    out.reserve(log_prob.size());
    for (double lp : log_prob) out.push_back(bits_per_dim(lp, dims));
    return out;
}

std::vector<double> log_prob_chunked(const FlowModel& model, const Tensor& x, std::uint64_t noise_seed,
                                     std::size_t chunk) {
    if (chunk == 0) throw ContractError("log_prob_chunked: zero chunk size");
    std::vector<double> out;
    out.reserve(x.n());
    for (std::size_t b = 0; b < x.n(); b += chunk) {
        const std::size_t e = std::min(x.n(), b + chunk);
        const auto part = model.log_prob(num::slice_batch(x, b, e), noise_seed, nullptr, b);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

} // namespace hflow::flow
