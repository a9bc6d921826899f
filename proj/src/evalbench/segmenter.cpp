#include "hflow/evalbench/segmenter.hpp"

#include "hflow/evalbench/metrics.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"

#include <cmath>

namespace hflow::eval {

namespace {

Tensor scale_input(const Tensor& x) {
    Tensor xn = x;
    for (double& v : xn.storage()) v = v / 127.5 - 1.0;
    return xn;
}

} // namespace

Segmenter::Segmenter(SegmenterConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.classes < 2) throw ContractError("segmenter: need at least 2 classes");
    if (cfg_.widths.empty()) throw ContractError("segmenter: needs at least one scale");
    num::Rng rng(cfg_.init_seed);
    num::UNetConfig u;
    u.in_channels = 1;
    u.out_channels = cfg_.classes;
    u.widths = cfg_.widths;
    u.convs_per_block = cfg_.convs_per_block;
    u.normalize = true;
    u.zero_head = false;
    net_ = num::UNet("seg", u, rng);
}

Tensor Segmenter::logits(const Tensor& x, Cache* cache) const {
    num::require_rank(x, 4, "segmenter input");
    return net_.forward(scale_input(x), cache ? &cache->net : nullptr);
}

Tensor softmax_channels(const Tensor& logits) {
    num::require_rank(logits, 4, "softmax_channels");
    Tensor p = logits;
    const std::size_t n = p.n(), k = p.c(), hw = p.plane();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
            double m = -INFINITY;
            for (std::size_t c = 0; c < k; ++c) m = std::max(m, p.plane_ptr(b, c)[i]);
            double s = 0.0;
            for (std::size_t c = 0; c < k; ++c) s += (p.plane_ptr(b, c)[i] = std::exp(p.plane_ptr(b, c)[i] - m));
            for (std::size_t c = 0; c < k; ++c) p.plane_ptr(b, c)[i] /= s;
        }
    return p;
}

Tensor argmax_channels(const Tensor& probs) {
    num::require_rank(probs, 4, "argmax_channels");
    const std::size_t n = probs.n(), k = probs.c(), hw = probs.plane();
    Tensor out = Tensor::nchw(n, 1, probs.h(), probs.w());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c)
                if (probs.plane_ptr(b, c)[i] > probs.plane_ptr(b, best)[i]) best = c;
            out[b * hw + i] = static_cast<double>(best);
        }
    return out;
}

Tensor Segmenter::probabilities(const Tensor& x, std::size_t chunk) const {
    std::vector<Tensor> parts;
    for (std::size_t b = 0; b < x.n(); b += chunk)
        parts.push_back(softmax_channels(logits(num::slice_batch(x, b, std::min(x.n(), b + chunk)))));
    return num::concat_batch(parts);
}

Tensor Segmenter::predict(const Tensor& x, std::size_t chunk) const { return argmax_channels(probabilities(x, chunk)); }

double Segmenter::cross_entropy(const Tensor& x, const Tensor& labels, bool backward) {
    num::require_rank(labels, 4, "segmenter labels");
    if (labels.n() != x.n() || labels.c() != 1 || labels.h() != x.h() || labels.w() != x.w())
        throw ContractError("segmenter: labels " + num::shape_string(labels.shape()) + " do not match images " +
                            num::shape_string(x.shape()));
    Cache cache;
    const Tensor z = logits(x, backward ? &cache : nullptr);
    Tensor p = softmax_channels(z);
    const std::size_t n = x.n(), k = cfg_.classes, hw = x.plane();
    const double scale = 1.0 / static_cast<double>(n * hw);
    double loss = 0.0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
            const double l = labels[b * hw + i];
            if (!(l >= 0.0) || l >= static_cast<double>(k))
                throw ContractError("segmenter: label " + std::to_string(l) + " outside 0.." + std::to_string(k - 1));
            const auto c = static_cast<std::size_t>(l);
            loss -= std::log(std::max(p.plane_ptr(b, c)[i], 1e-300));
            p.plane_ptr(b, c)[i] -= 1.0;
        }
    if (backward) {
        p *= scale;
        net_.backward(cache.net, p, true);
    }
    return loss * scale;
}

num::ParamRefs Segmenter::params() {
    num::ParamRefs out;
    net_.collect(out);
    return out;
}

num::TensorArchive Segmenter::to_archive() const {
    num::TensorArchive ar;
    num::put_scalar(ar, "meta.classes", static_cast<double>(cfg_.classes));
    num::put_scalar(ar, "meta.convs_per_block", static_cast<double>(cfg_.convs_per_block));
    Tensor w({cfg_.widths.size()});
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) w[i] = static_cast<double>(cfg_.widths[i]);
    ar.emplace_back("meta.widths", w);
    num::append_params(ar, const_cast<Segmenter*>(this)->params());
    return ar;
}

Segmenter Segmenter::from_archive(const num::TensorArchive& ar) {
    SegmenterConfig cfg;
    cfg.classes = static_cast<std::size_t>(num::get_scalar(ar, "meta.classes"));
    cfg.convs_per_block = static_cast<std::size_t>(num::get_scalar(ar, "meta.convs_per_block"));
    cfg.widths.clear();
    for (double v : num::find_tensor(ar, "meta.widths").values()) cfg.widths.push_back(static_cast<std::size_t>(v));
    Segmenter s(cfg);
    num::load_params(ar, s.params());
    return s;
}

void Segmenter::save(const std::filesystem::path& path) const { num::write_archive(path, to_archive()); }

Segmenter Segmenter::load(const std::filesystem::path& path) { return from_archive(num::read_archive(path)); }

SegTrainResult train_segmenter(Segmenter& seg, const Tensor& images, const Tensor& masks, const SegTrainConfig& cfg) {
    num::require_rank(images, 4, "train_segmenter");
    if (images.n() == 0) throw ContractError("train_segmenter: empty training set");
    if (cfg.batch == 0) throw ContractError("train_segmenter: batch size must be positive");
    SegTrainResult r;
    const num::ParamRefs params = seg.params();
    num::AdamState adam(cfg.adam);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        num::Rng rng(num::derive_seed(cfg.seed, it));
        std::vector<std::size_t> idx(cfg.batch);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(images.n()) - 1));
        try {
            num::zero_grads(params);
            const double l = seg.cross_entropy(num::gather_batch(images, idx), num::gather_batch(masks, idx), true);
            if (!std::isfinite(l)) throw NumericError("train_segmenter: non-finite loss");
            num::adam_step(params, adam);
            r.loss.push_back(l);
        } catch (const NumericError& e) {
            r.diverged = true;
            r.message = "iteration " + std::to_string(it + 1) + ": " + e.what();
            break;
        }
    }
    return r;
}

SegEvaluation evaluate_segmentation(const Segmenter& seg, const Tensor& images, const Tensor& masks) {
    num::require_same_shape(images, masks, "evaluate_segmentation");
    if (images.n() == 0) throw ContractError("evaluate_segmentation: empty image set");
    const std::size_t k = seg.config().classes;
    const Tensor probs = seg.probabilities(images);
    const Tensor pred = argmax_channels(probs);
    const std::vector<double> ent = mean_entropy(probs);
    SegEvaluation ev;
    double hd_sum = 0.0;
    std::size_t hd_count = 0;
    for (std::size_t b = 0; b < images.n(); ++b) {
        const Tensor p = num::slice_batch(pred, b, b + 1), t = num::slice_batch(masks, b, b + 1);
        const double d = dice(p, t, k).mean;
        ev.per_image_dice.push_back(d);
        ev.dice += d;
        ev.entropy += ent[b];
        for (std::size_t c = 1; c < k; ++c) {
            try {
                hd_sum += hd95(p, t, c);
                ++hd_count;
            } catch (const ContractError&) {
                ++ev.hd95_missing;
            }
        }
    }
    const auto n = static_cast<double>(images.n());
    ev.dice /= n;
    ev.entropy /= n;
    ev.hd95 = hd_count ? hd_sum / static_cast<double>(hd_count) : std::nan("");
    return ev;
}

} // namespace hflow::eval
