#include "hflow/augment/augment.hpp"

#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"
#include "hflow/numerics/text.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hflow::aug {

using num::Tensor;

namespace {

double clamp255(double v) { return std::clamp(v, 0.0, 255.0); }

std::uint8_t to_level(double v) { return static_cast<std::uint8_t>(std::lround(clamp255(v))); }

void check_levels(const Tensor& x, const char* op) {
    for (double v : x.values())
        if (!(v >= 0.0 && v <= 255.0))
            throw ContractError(std::string(op) + ": intensity " + std::to_string(v) + " outside [0, 255]");
}

} // namespace

Lut identity_lut() {
    Lut lut{};
    for (int i = 0; i < 256; ++i) lut[i] = static_cast<std::uint8_t>(i);
    return lut;
}

bool is_monotone(const Lut& lut) { return std::is_sorted(lut.begin(), lut.end()); }

Lut compose(const Lut& first, const Lut& then) {
    Lut out{};
    for (int i = 0; i < 256; ++i) out[i] = then[first[i]];
    return out;
}

Tensor apply_lut(const Lut& lut, const Tensor& images) {
    check_levels(images, "apply_lut");
    Tensor out = images;
    for (double& v : out.storage()) v = lut[static_cast<std::size_t>(std::lround(v))];
    return out;
}

double MonotoneMap::operator()(double x) const {
    if (inputs.size() < 2 || inputs.size() != outputs.size()) throw ContractError("MonotoneMap: needs >= 2 knots");
    if (x <= inputs.front()) return outputs.front();
    if (x >= inputs.back()) return outputs.back();
    const auto it = std::upper_bound(inputs.begin(), inputs.end(), x);
    const std::size_t k = static_cast<std::size_t>(it - inputs.begin());
    const double t = (x - inputs[k - 1]) / (inputs[k] - inputs[k - 1]);
    return outputs[k - 1] + t * (outputs[k] - outputs[k - 1]);
}

Lut MonotoneMap::to_lut() const {
    Lut lut{};
    for (int i = 0; i < 256; ++i) lut[i] = to_level((*this)(i));
    return lut;
}

const char* kind_name(Kind k) {
    switch (k) {
    case Kind::Gamma: return "gamma";
    case Kind::Brightness: return "brightness";
    case Kind::Scale: return "scale";
    case Kind::Monotone: return "monotone";
    }
    return "?";
}

Kind kind_from_name(const std::string& name) {
    for (Kind k : {Kind::Gamma, Kind::Brightness, Kind::Scale, Kind::Monotone})
        if (name == kind_name(k)) return k;
    throw ContractError("unknown augmentation kind '" + name + "'");
}

void AugmentationSpec::validate() const {
    if (kinds.empty()) throw ContractError("augmentation spec: no kinds enabled");
    auto check_range = [](const Range& r, const char* what) {
        if (!(r.lo <= r.hi)) throw ContractError(std::string("augmentation spec: empty ") + what + " range");
    };
    check_range(gamma, "gamma");
    check_range(brightness, "brightness");
    check_range(scale, "scale");
    if (gamma.lo <= 0.0) throw ContractError("augmentation spec: gamma must be positive");
    if (scale.lo < 0.0) throw ContractError("augmentation spec: scale must be non-negative");
    if (min_knots < 2 || min_knots > max_knots) throw ContractError("augmentation spec: bad knot count range");
    if (min_ops < 1 || min_ops > max_ops) throw ContractError("augmentation spec: bad composition length range");
    if (knot_jitter < 0.0) throw ContractError("augmentation spec: negative knot jitter");
}

double Op::operator()(double x) const {
    switch (kind) {
    case Kind::Gamma: return clamp255(255.0 * std::pow(clamp255(x) / 255.0, value));
    case Kind::Brightness: return clamp255(x + value);
    case Kind::Scale: return clamp255(x * value);
    case Kind::Monotone: return clamp255(map(x));
    }
    return x;
}

Lut lut_of(const std::vector<Op>& ops) {
    Lut lut{};
    for (int i = 0; i < 256; ++i) {
        double v = i;
        for (const auto& op : ops) v = op(v);
        lut[i] = to_level(v);
    }
    return lut;
}

Transform sample_transform(const AugmentationSpec& spec, std::uint64_t seed) {
    spec.validate();
    num::Rng rng(seed);
    Transform tr;
    const auto count = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.min_ops), static_cast<std::int64_t>(spec.max_ops)));
    for (std::size_t k = 0; k < count; ++k) {
        Op op;
        op.kind = spec.kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.kinds.size()) - 1))];
        switch (op.kind) {
        case Kind::Gamma:
            // Log-uniform so that contrast compression and expansion are equally likely.
            op.value = std::exp(rng.uniform(std::log(spec.gamma.lo), std::log(spec.gamma.hi)));
            break;
        case Kind::Brightness: op.value = rng.uniform(spec.brightness.lo, spec.brightness.hi); break;
        case Kind::Scale: op.value = rng.uniform(spec.scale.lo, spec.scale.hi); break;
        case Kind::Monotone: {
            const auto knots = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_knots),
                                                                        static_cast<std::int64_t>(spec.max_knots)));
            for (std::size_t i = 0; i < knots; ++i) {
                const double xin = 255.0 * static_cast<double>(i) / static_cast<double>(knots - 1);
                op.map.inputs.push_back(xin);
                op.map.outputs.push_back(clamp255(xin + rng.uniform(-spec.knot_jitter, spec.knot_jitter)));
            }
            std::sort(op.map.outputs.begin(), op.map.outputs.end());
            break;
        }
        }
        tr.ops.push_back(std::move(op));
    }
    tr.lut = lut_of(tr.ops);
    return tr;
}

Image apply(const AugmentationSpec& spec, const Image& x, std::uint64_t seed) {
    num::require_rank(x, 4, "augment::apply");
    check_levels(x, "augment::apply");
    Image out = x;
    const std::size_t item = x.c() * x.plane();
    for (std::size_t n = 0; n < x.n(); ++n) {
        const Lut lut = sample_transform(spec, num::derive_seed(seed, n)).lut;
        double* p = out.data() + n * item;
        for (std::size_t i = 0; i < item; ++i) p[i] = lut[static_cast<std::size_t>(std::lround(p[i]))];
    }
    return out;
}

double mse(const Image& a, const Image& b) {
    num::require_same_shape(a, b, "augment::mse");
    if (a.size() == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

Image apply_ood(const AugmentationSpec& spec, const Image& x, std::uint64_t seed, double threshold) {
    num::require_rank(x, 4, "augment::apply_ood");
    std::vector<Tensor> items;
    items.reserve(x.n());
    for (std::size_t n = 0; n < x.n(); ++n) {
        const Tensor item = num::slice_batch(x, n, n + 1);
        const std::uint64_t item_seed = num::derive_seed(seed, n);
        bool found = false;
        for (int attempt = 0; attempt < kMaxOodAttempts && !found; ++attempt) {
            Tensor aug = apply(spec, item, num::derive_seed(item_seed, static_cast<std::uint64_t>(attempt)));
            if (threshold <= 0.0 || mse(item, aug) > threshold) {
                items.push_back(std::move(aug));
                found = true;
            }
        }
        if (!found)
            throw ContractError("apply_ood: no transform exceeded MSE threshold " + std::to_string(threshold) +
                                " in " + std::to_string(kMaxOodAttempts) +
                                " attempts; widen the augmentation parameter ranges");
    }
    return num::concat_batch(items);
}

void write_keys(const AugmentationSpec& spec, const std::string& prefix, std::map<std::string, std::string>& out) {
    std::string kinds;
    for (std::size_t i = 0; i < spec.kinds.size(); ++i) kinds += (i ? "," : "") + std::string(kind_name(spec.kinds[i]));
    out[prefix + "kinds"] = kinds;
    out[prefix + "gamma"] = num::format_double(spec.gamma.lo) + "," + num::format_double(spec.gamma.hi);
    out[prefix + "brightness"] = num::format_double(spec.brightness.lo) + "," + num::format_double(spec.brightness.hi);
    out[prefix + "scale"] = num::format_double(spec.scale.lo) + "," + num::format_double(spec.scale.hi);
    out[prefix + "knots"] = std::to_string(spec.min_knots) + "," + std::to_string(spec.max_knots);
    out[prefix + "knot-jitter"] = num::format_double(spec.knot_jitter);
    out[prefix + "ops"] = std::to_string(spec.min_ops) + "," + std::to_string(spec.max_ops);
    out[prefix + "seed"] = std::to_string(spec.seed);
}

std::vector<std::string> key_names(const std::string& prefix) {
    std::vector<std::string> names;
    for (const char* k : {"kinds", "gamma", "brightness", "scale", "knots", "knot-jitter", "ops", "seed"})
        names.push_back(prefix + k);
    return names;
}

AugmentationSpec read_keys(const std::map<std::string, std::string>& in, const std::string& prefix,
                           AugmentationSpec spec) {
    auto split = [](const std::string& s) {
        std::vector<std::string> parts;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) parts.push_back(item);
        return parts;
    };
    auto pair_of = [&](const std::string& key, auto& lo, auto& hi) {
        auto it = in.find(prefix + key);
        if (it == in.end()) return;
        const auto parts = split(it->second);
        if (parts.size() != 2) throw ContractError("config key " + prefix + key + " expects 'lo,hi'");
        if constexpr (std::is_same_v<std::decay_t<decltype(lo)>, double>) {
            lo = std::stod(parts[0]);
            hi = std::stod(parts[1]);
        } else {
            lo = std::stoull(parts[0]);
            hi = std::stoull(parts[1]);
        }
    };
    if (auto it = in.find(prefix + "kinds"); it != in.end()) {
        spec.kinds.clear();
        for (const auto& name : split(it->second)) spec.kinds.push_back(kind_from_name(name));
    }
    pair_of("gamma", spec.gamma.lo, spec.gamma.hi);
    pair_of("brightness", spec.brightness.lo, spec.brightness.hi);
    pair_of("scale", spec.scale.lo, spec.scale.hi);
    pair_of("knots", spec.min_knots, spec.max_knots);
    pair_of("ops", spec.min_ops, spec.max_ops);
    if (auto it = in.find(prefix + "knot-jitter"); it != in.end()) spec.knot_jitter = std::stod(it->second);
    if (auto it = in.find(prefix + "seed"); it != in.end()) spec.seed = std::stoull(it->second);
    spec.validate();
    return spec;
}

} // namespace hflow::aug
