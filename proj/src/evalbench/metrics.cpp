#include "hflow/evalbench/metrics.hpp"

#include "hflow/numerics/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace hflow::eval {

namespace {

void require_label_image(const Tensor& t, const char* op) {
    num::require_rank(t, 4, op);
    if (t.n() != 1 || t.c() != 1)
        throw ContractError(std::string(op) + ": expected a single 1 x 1 x H x W label image, got " +
                            num::shape_string(t.shape()));
}

// Squared distance to the nearest site along one line (Felzenszwalb and
// Huttenlocher). Exact for integer inputs.
void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    std::size_t k = 0;
    z[0] = -1e300;
    z[1] = 1e300;
    const auto intersect = [&](std::size_t q, std::size_t p) {
        const auto dq = static_cast<double>(q), dp = static_cast<double>(p);
        return ((f[q] + dq * dq) - (f[p] + dp * dp)) / (2.0 * dq - 2.0 * dp);
    };
    for (std::size_t q = 1; q < n; ++q) {
        double s = intersect(q, v[k]);
        while (s <= z[k]) s = intersect(q, v[--k]); // z[0] = -inf ends the loop
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = 1e300;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
        d[q] = dq * dq + f[v[k]];
    }
}

// Squared Euclidean distance map to the given site pixels.
std::vector<double> squared_distance_map(const std::vector<std::size_t>& sites, std::size_t h, std::size_t w) {
    constexpr double kFar = 1e12;
    std::vector<double> g(h * w, kFar);
    for (std::size_t p : sites) g[p] = 0.0;
    std::vector<std::size_t> v;
    std::vector<double> z, col(h), out(std::max(h, w));
    for (std::size_t j = 0; j < w; ++j) {
        for (std::size_t i = 0; i < h; ++i) col[i] = g[i * w + j];
        edt_1d(col.data(), out.data(), h, v, z);
        for (std::size_t i = 0; i < h; ++i) g[i * w + j] = out[i];
    }
    std::vector<double> row(w);
    for (std::size_t i = 0; i < h; ++i) {
        std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(i * w), w, row.begin());
        edt_1d(row.data(), g.data() + i * w, w, v, z);
    }
    return g;
}

void require_normalized(std::span<const double> h, const char* which) {
    double s = 0.0;
    for (double v : h) {
        if (!(v >= 0.0)) throw ContractError(std::string("wasserstein_hist: ") + which + " has a negative or NaN bin");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9)
        throw ContractError(std::string("wasserstein_hist: ") + which + " sums to " + std::to_string(s) +
                            ", expected 1");
}

} // namespace

DiceResult dice(const Tensor& pred, const Tensor& truth, std::size_t classes) {
    num::require_same_shape(pred, truth, "dice");
    if (classes < 2) throw ContractError("dice: need at least 2 classes");
    std::vector<double> inter(classes, 0.0), size_p(classes, 0.0), size_t_(classes, 0.0);
    const auto check = [&](double v) {
        if (!(v >= 0.0) || v >= static_cast<double>(classes) || v != std::floor(v))
            throw ContractError("dice: label " + std::to_string(v) + " outside 0.." + std::to_string(classes - 1));
        return static_cast<std::size_t>(v);
    };
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const std::size_t a = check(pred[i]), b = check(truth[i]);
        size_p[a] += 1.0;
        size_t_[b] += 1.0;
        if (a == b) inter[a] += 1.0;
    }
    DiceResult r;
    for (std::size_t c = 0; c < classes; ++c) {
        const double denom = size_p[c] + size_t_[c];
        r.per_class.push_back(denom == 0.0 ? 1.0 : 2.0 * inter[c] / denom);
    }
    r.mean = std::accumulate(r.per_class.begin() + 1, r.per_class.end(), 0.0) / static_cast<double>(classes - 1);
    return r;
}

std::vector<std::size_t> boundary_pixels(const Tensor& labels, double cls) {
    require_label_image(labels, "boundary_pixels");
    const std::size_t h = labels.h(), w = labels.w();
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            if (labels[i * w + j] != cls) continue;
            const bool edge = i == 0 || j == 0 || i + 1 == h || j + 1 == w;
            if (edge || labels[(i - 1) * w + j] != cls || labels[(i + 1) * w + j] != cls ||
                labels[i * w + j - 1] != cls || labels[i * w + j + 1] != cls)
                out.push_back(i * w + j);
        }
    return out;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ContractError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo + 1 >= values.size()) return values.back();
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

double hd95(const Tensor& pred, const Tensor& truth, std::size_t cls) {
    require_label_image(pred, "hd95");
    num::require_same_shape(pred, truth, "hd95");
    const auto c = static_cast<double>(cls);
    const auto bp = boundary_pixels(pred, c);
    const auto bt = boundary_pixels(truth, c);
    if (bp.empty() || bt.empty())
        throw ContractError("hd95: class " + std::to_string(cls) + " is empty in the " +
                            (bp.empty() ? "prediction" : "reference"));
    const std::size_t h = pred.h(), w = pred.w();
    const auto dp = squared_distance_map(bp, h, w);
    const auto dt = squared_distance_map(bt, h, w);
    std::vector<double> d;
    d.reserve(bp.size() + bt.size());
    for (std::size_t p : bp) d.push_back(std::sqrt(dt[p]));
    for (std::size_t p : bt) d.push_back(std::sqrt(dp[p]));
    return percentile(std::move(d), 0.95);
}

std::vector<double> histogram256(const Tensor& images) {
    if (images.size() == 0) throw ContractError("histogram256: empty input");
    std::vector<double> h(256, 0.0);
    for (double v : images.storage()) {
        if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v))
            throw ContractError("histogram256: value " + std::to_string(v) + " is not an integer level in [0, 255]");
        h[static_cast<std::size_t>(v)] += 1.0;
    }
    const double n = static_cast<double>(images.size());
    for (double& v : h) v /= n;
    return h;
}

double wasserstein_hist(std::span<const double> h1, std::span<const double> h2) {
    if (h1.size() != h2.size() || h1.empty())
        throw ContractError("wasserstein_hist: histograms have " + std::to_string(h1.size()) + " and " +
                            std::to_string(h2.size()) + " bins");
    require_normalized(h1, "first histogram");
    require_normalized(h2, "second histogram");
    double c1 = 0.0, c2 = 0.0, w = 0.0;
    for (std::size_t k = 0; k + 1 < h1.size(); ++k) {
        c1 += h1[k];
        c2 += h2[k];
        w += std::abs(c1 - c2);
    }
    return w;
}

aug::Lut hist_match_lut(const Tensor& image, std::span<const double> reference) {
    if (reference.size() != 256) throw ContractError("hist_match: reference histogram needs 256 bins");
    require_normalized(reference, "reference histogram");
    const std::vector<double> h = histogram256(image);
    std::vector<double> cdf_ref(256);
    std::partial_sum(reference.begin(), reference.end(), cdf_ref.begin());
    cdf_ref[255] = std::max(cdf_ref[255], 1.0);
    aug::Lut lut{};
    double before = 0.0;
    std::size_t u = 0;
    for (std::size_t v = 0; v < 256; ++v) {
        const double q = before + 0.5 * h[v];
        while (u < 255 && cdf_ref[u] < q) ++u; // q is non-decreasing in v
        lut[v] = static_cast<std::uint8_t>(u);
        before += h[v];
    }
    return lut;
}

Tensor hist_match(const Tensor& images, std::span<const double> reference) {
    num::require_rank(images, 4, "hist_match");
    std::vector<Tensor> out;
    for (std::size_t b = 0; b < images.n(); ++b) {
        const Tensor item = num::slice_batch(images, b, b + 1);
        out.push_back(aug::apply_lut(hist_match_lut(item, reference), item));
    }
    return num::concat_batch(out);
}

std::vector<double> friedman_rank(const std::vector<std::vector<double>>& table,
                                  const std::vector<bool>& higher_better) {
    const std::size_t methods = table.size(), settings = higher_better.size();
    if (methods == 0 || settings == 0) throw ContractError("friedman_rank: empty table");
    for (std::size_t m = 0; m < methods; ++m) {
        if (table[m].size() != settings)
            throw ContractError("friedman_rank: method " + std::to_string(m) + " has " +
                                std::to_string(table[m].size()) + " scores, expected " + std::to_string(settings));
        for (std::size_t s = 0; s < settings; ++s)
            if (std::isnan(table[m][s]))
                throw ContractError("friedman_rank: missing score for method " + std::to_string(m) + " in setting " +
                                    std::to_string(s));
    }
    std::vector<double> rank(methods, 0.0);
    std::vector<std::size_t> order(methods);
    for (std::size_t s = 0; s < settings; ++s) {
        std::iota(order.begin(), order.end(), 0);
        const auto better = [&](std::size_t a, std::size_t b) {
            return higher_better[s] ? table[a][s] > table[b][s] : table[a][s] < table[b][s];
        };
        std::stable_sort(order.begin(), order.end(), better);
        for (std::size_t i = 0; i < methods;) {
            std::size_t j = i + 1;
            while (j < methods && table[order[j]][s] == table[order[i]][s]) ++j;
            const double shared = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1..j
            for (std::size_t k = i; k < j; ++k) rank[order[k]] += shared;
            i = j;
        }
    }
    for (double& r : rank) r /= static_cast<double>(settings);
    return rank;
}

std::vector<double> mean_entropy(const Tensor& probs) {
    num::require_rank(probs, 4, "mean_entropy");
    const std::size_t n = probs.n(), k = probs.c(), hw = probs.plane();
    std::vector<double> out(n, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            const double* p = probs.plane_ptr(b, c);
            for (std::size_t i = 0; i < hw; ++i)
                if (p[i] > 0.0) s -= p[i] * std::log(p[i]);
        }
        out[b] = s / static_cast<double>(hw);
    }
    return out;
}

} // namespace hflow::eval
