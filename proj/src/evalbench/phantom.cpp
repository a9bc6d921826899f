#include "hflow/evalbench/phantom.hpp"

#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hflow::eval {

namespace {

// Separable Gaussian blur of a single plane with edge clamping.
std::vector<double> blur(const std::vector<double>& in, std::size_t h, std::size_t w, double sigma) {
    const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double s = 0.0;
    for (std::ptrdiff_t i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        s += k[static_cast<std::size_t>(i + r)];
    }
    for (double& v : k) v /= s;
    const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
    std::vector<double> tmp(in.size()), out(in.size());
    for (std::ptrdiff_t i = 0; i < H; ++i)
        for (std::ptrdiff_t j = 0; j < W; ++j) {
            double acc = 0.0;
            for (std::ptrdiff_t d = -r; d <= r; ++d)
                acc += k[static_cast<std::size_t>(d + r)] * in[static_cast<std::size_t>(i * W + std::clamp(j + d, std::ptrdiff_t{0}, W - 1))];
            tmp[static_cast<std::size_t>(i * W + j)] = acc;
        }
    for (std::ptrdiff_t i = 0; i < H; ++i)
        for (std::ptrdiff_t j = 0; j < W; ++j) {
            double acc = 0.0;
            for (std::ptrdiff_t d = -r; d <= r; ++d)
                acc += k[static_cast<std::size_t>(d + r)] * tmp[static_cast<std::size_t>(std::clamp(i + d, std::ptrdiff_t{0}, H - 1) * W + j)];
            out[static_cast<std::size_t>(i * W + j)] = acc;
        }
    return out;
}

} // namespace

std::vector<Band> default_bands(std::size_t classes) {
    if (classes < 2 || classes > 5) throw ContractError("phantom: class count must be in 2..5");
    std::vector<Band> b{{0.0, 2.0}};
    if (classes == 2) {
        b.push_back({122.5, 137.5});
        return b;
    }
    const double step = 165.0 / static_cast<double>(classes - 2);
    for (std::size_t k = 1; k < classes; ++k) {
        const double c = 47.5 + static_cast<double>(k - 1) * step;
        b.push_back({c - 7.5, c + 7.5});
    }
    return b;
}

std::vector<Band> PhantomSpec::resolved_bands() const { return bands.empty() ? default_bands(classes) : bands; }

void PhantomSpec::validate() const {
    if (size < 16 || size % 16 != 0) throw ContractError("phantom: size " + std::to_string(size) + " must be a positive multiple of 16");
    if (classes < 2 || classes > 5) throw ContractError("phantom: class count must be in 2..5");
    const auto b = resolved_bands();
    if (b.size() != classes) throw ContractError("phantom: need one intensity band per class");
    for (std::size_t k = 0; k < b.size(); ++k) {
        if (!(b[k].lo <= b[k].hi) || b[k].lo < 0.0 || b[k].hi > 255.0)
            throw ContractError("phantom: band of class " + std::to_string(k) + " is empty or outside [0, 255]");
        if (k > 0 && !(b[k].lo > b[k - 1].hi))
            throw ContractError("phantom: intensity bands of classes " + std::to_string(k - 1) + " and " +
                                std::to_string(k) + " overlap or are out of order");
    }
    if (!(smoothing_sigma > 0.0)) throw ContractError("phantom: smoothing sigma must be positive");
    if (noise_sigma < 0.0) throw ContractError("phantom: negative noise sigma");
}

void SiteTransform::validate() const {
    if (map.inputs.size() < 2 || map.inputs.size() != map.outputs.size())
        throw ContractError("site " + name + ": map needs >= 2 matching knots");
    for (std::size_t i = 1; i < map.inputs.size(); ++i)
        if (!(map.inputs[i] > map.inputs[i - 1]) || map.outputs[i] < map.outputs[i - 1])
            throw ContractError("site " + name + ": intensity map is not monotone");
    if (noise_sigma < 0.0) throw ContractError("site " + name + ": negative noise sigma");
    if (!(bias_amplitude >= 0.0 && bias_amplitude < 1.0))
        throw ContractError("site " + name + ": bias amplitude must be in [0, 1)");
}

Anatomy sample_anatomy(const PhantomSpec& spec, std::uint64_t seed) {
    spec.validate();
    num::Rng rng(seed);
    const std::size_t S = spec.size, K = spec.classes;
    const double f = static_cast<double>(S) / 64.0;
    const double cx = 0.5 * static_cast<double>(S) + rng.uniform(-2.0, 2.0) * f;
    const double cy = 0.5 * static_cast<double>(S) + rng.uniform(-2.0, 2.0) * f;
    const double ax = rng.uniform(0.36, 0.44) * static_cast<double>(S);
    const double ay = rng.uniform(0.36, 0.44) * static_cast<double>(S);
    double amp[3], phase[3];
    for (int m = 0; m < 3; ++m) {
        amp[m] = rng.uniform(0.0, 0.04);
        phase[m] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    const double ring = rng.uniform(0.12, 0.18);

    Anatomy a;
    a.labels = Tensor::nchw(1, 1, S, S);
    std::vector<double> rho(S * S);
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) {
            const double dy = (static_cast<double>(i) + 0.5 - cy) / ay;
            const double dx = (static_cast<double>(j) + 0.5 - cx) / ax;
            const double th = std::atan2(dy, dx);
            double r = 1.0;
            for (int m = 0; m < 3; ++m) r += amp[m] * std::cos((m + 2) * th + phase[m]);
            const double p = std::sqrt(dx * dx + dy * dy) / r;
            rho[i * S + j] = p;
            double label = 0.0;
            if (p <= 1.0) label = (K == 2 || p > 1.0 - ring) ? 1.0 : 2.0;
            a.labels[i * S + j] = label;
        }

    // Blobs: thresholded smooth noise inside the interior.
    std::vector<double> noise(S * S);
    for (double& v : noise) v = rng.normal();
    const std::vector<double> field = blur(noise, S, S, spec.smoothing_sigma * f);
    if (K >= 4) {
        std::vector<double> inside;
        for (std::size_t p = 0; p < S * S; ++p)
            if (rho[p] <= 1.0 - ring - 0.08) inside.push_back(field[p]);
        if (!inside.empty()) {
            const std::size_t q = static_cast<std::size_t>(0.65 * static_cast<double>(inside.size() - 1));
            std::nth_element(inside.begin(), inside.begin() + static_cast<std::ptrdiff_t>(q), inside.end());
            const double thr = inside[q];
            for (std::size_t p = 0; p < S * S; ++p)
                if (rho[p] <= 1.0 - ring - 0.08 && field[p] > thr) a.labels[p] = 3.0;
        }
    }
    // Small structure: an ellipse near the centre.
    if (K >= 5) {
        const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double rad = rng.uniform(0.0, 0.35);
        const double sx = cx + rad * ax * std::cos(ang), sy = cy + rad * ay * std::sin(ang);
        const double rx = rng.uniform(2.5, 4.0) * f, ry = rng.uniform(2.5, 4.0) * f;
        for (std::size_t i = 0; i < S; ++i)
            for (std::size_t j = 0; j < S; ++j) {
                const double dy = (static_cast<double>(i) + 0.5 - sy) / ry;
                const double dx = (static_cast<double>(j) + 0.5 - sx) / rx;
                if (dx * dx + dy * dy <= 1.0) a.labels[i * S + j] = 4.0;
            }
    }
    for (const Band& b : spec.resolved_bands()) a.intensity.push_back(rng.uniform(b.lo, b.hi));
    return a;
}

Tensor base_image(const PhantomSpec& spec, const Anatomy& a, std::uint64_t noise_seed) {
    num::Rng rng(noise_seed);
    Tensor out = a.labels;
    for (double& v : out.storage()) {
        v = a.intensity[static_cast<std::size_t>(v)];
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
    }
    return out;
}

Tensor render(const PhantomSpec& spec, const Anatomy& a, const SiteTransform& site, std::uint64_t noise_seed) {
    site.validate();
    const Tensor base = base_image(spec, a, noise_seed);
    num::Rng rng(num::derive_seed(noise_seed, 1));
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const std::size_t S = base.h();
    Tensor out = base;
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j) {
            const double u = static_cast<double>(i) / static_cast<double>(S);
            const double v = static_cast<double>(j) / static_cast<double>(S);
            const double bias = 1.0 + site.bias_amplitude * std::sin(std::numbers::pi * (u * std::cos(theta) + v * std::sin(theta)) + phi);
            double x = site.map(std::clamp(base[i * S + j], 0.0, 255.0)) * bias;
            if (site.noise_sigma > 0.0) x += site.noise_sigma * rng.normal();
            out[i * S + j] = std::clamp(std::round(x), 0.0, 255.0);
        }
    return out;
}

const char* split_name(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    for (Split s : {Split::Train, Split::Val, Split::Test})
        if (name == split_name(s)) return s;
    throw ContractError("unknown split '" + name + "'");
}

std::vector<std::size_t> SiteData::indices_of(Split s) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == s) idx.push_back(i);
    return idx;
}

Tensor SiteData::images_of(Split s) const { return num::gather_batch(images, indices_of(s)); }
Tensor SiteData::masks_of(Split s) const { return num::gather_batch(masks, indices_of(s)); }

const SiteData& PhantomDataset::site(const std::string& name) const { return sites[site_index(name)]; }

std::size_t PhantomDataset::site_index(const std::string& name) const {
    for (std::size_t i = 0; i < sites.size(); ++i)
        if (sites[i].transform.name == name) return i;
    throw ContractError("dataset has no site named '" + name + "'");
}

SplitCounts split_counts(std::size_t n) {
    const auto train = static_cast<std::size_t>(std::lround(0.60 * static_cast<double>(n)));
    const auto test = static_cast<std::size_t>(std::lround(0.25 * static_cast<double>(n)));
    return {train, n - train - test, test};
}

PhantomDataset generate(const PhantomSpec& spec, const std::vector<SiteTransform>& sites, std::size_t n_per_site,
                        std::uint64_t seed) {
    spec.validate();
    if (n_per_site < 8) throw ContractError("generate: need at least 8 images per site, got " + std::to_string(n_per_site));
    if (sites.empty()) throw ContractError("generate: no sites");
    PhantomDataset ds;
    ds.spec = spec;
    ds.seed = seed;
    const SplitCounts counts = split_counts(n_per_site);
    for (std::size_t k = 0; k < sites.size(); ++k) {
        sites[k].validate();
        for (std::size_t j = 0; j < k; ++j)
            if (sites[j].name == sites[k].name) throw ContractError("generate: duplicate site name " + sites[k].name);
        SiteData sd;
        sd.transform = sites[k];
        std::vector<Tensor> imgs, masks;
        for (std::size_t i = 0; i < n_per_site; ++i) {
            const std::uint64_t subject = k * n_per_site + i;
            const Anatomy a = sample_anatomy(spec, num::derive_seed(seed, subject));
            imgs.push_back(render(spec, a, sites[k], num::derive_seed(seed ^ 0x5173a11ULL, subject)));
            masks.push_back(a.labels);
        }
        sd.images = num::concat_batch(imgs);
        sd.masks = num::concat_batch(masks);
        std::vector<std::size_t> order(n_per_site);
        for (std::size_t i = 0; i < n_per_site; ++i) order[i] = i;
        num::Rng rng(num::derive_seed(seed, 0x5b1175ULL + k));
        for (std::size_t i = n_per_site; i-- > 1;)
            std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
        sd.split.assign(n_per_site, Split::Test);
        for (std::size_t r = 0; r < counts.train + counts.val; ++r)
            sd.split[order[r]] = r < counts.train ? Split::Train : Split::Val;
        ds.sites.push_back(std::move(sd));
    }
    return ds;
}

std::vector<SiteTransform> default_sites() {
    SiteTransform a;
    a.name = "site-a";
    a.noise_sigma = 0.5;
    a.bias_amplitude = 0.05;

    SiteTransform b;
    b.name = "site-b";
    b.map = {{0, 30, 80, 130, 180, 255}, {0, 45, 125, 175, 210, 245}};
    b.noise_sigma = 0.5;
    b.bias_amplitude = 0.15;

    SiteTransform c;
    c.name = "site-c";
    c.map = {{0, 40, 100, 160, 220, 255}, {0, 20, 55, 100, 160, 200}};
    c.noise_sigma = 0.5;
    c.bias_amplitude = 0.10;
    return {a, b, c};
}

std::vector<SiteTransform> default_sites(std::size_t count) {
    auto all = default_sites();
    if (count < 1 || count > all.size()) throw ContractError("default_sites: count must be in 1..3");
    all.resize(count);
    return all;
}

} // namespace hflow::eval
