#pragma once

#include "hflow/numerics/tensor.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace hflow::aug {

using Image = num::Tensor; // 1 x 1 x H x W (or N x 1 x H x W) with integer levels in [0, 255]

/// 256-entry intensity lookup table. Every transform the family emits is
/// materialised this way, so monotonicity can be checked exhaustively.
using Lut = std::array<std::uint8_t, 256>;

Lut identity_lut();
bool is_monotone(const Lut& lut);
Lut compose(const Lut& first, const Lut& then);
num::Tensor apply_lut(const Lut& lut, const num::Tensor& images);

/// Piecewise-linear monotone map through (input, output) knots.
struct MonotoneMap {
    std::vector<double> inputs;  // strictly increasing, first 0 and last 255
    std::vector<double> outputs; // non-decreasing, in [0, 255]

    double operator()(double x) const;
    Lut to_lut() const;
};

enum class Kind { Gamma, Brightness, Scale, Monotone };

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);

struct Range {
    double lo;
    double hi;
};

struct AugmentationSpec {
    std::vector<Kind> kinds{Kind::Gamma, Kind::Brightness, Kind::Scale, Kind::Monotone};
    Range gamma{0.4, 2.5};
    Range brightness{-60.0, 60.0};
    Range scale{0.6, 1.5};
    std::size_t min_knots = 4;
    std::size_t max_knots = 8;
    double knot_jitter = 40.0;
    std::size_t min_ops = 1;
    std::size_t max_ops = 3;
    std::uint64_t seed = 0;

    void validate() const;
};

// One primitive op with its drawn parameter(s).
struct Op {
    Kind kind;
    double value = 0.0; // gamma exponent, brightness shift or scale factor
    MonotoneMap map;    // only for Kind::Monotone

    double operator()(double x) const;
};

struct Transform {
    std::vector<Op> ops;
    Lut lut;
};

Transform sample_transform(const AugmentationSpec& spec, std::uint64_t seed);
Lut lut_of(const std::vector<Op>& ops);

/// Apply one random transform drawn from `seed` to every image in the batch.
Image apply(const AugmentationSpec& spec, const Image& x, std::uint64_t seed);

/// Mean squared difference on the 0-255 scale.
double mse(const Image& a, const Image& b);

inline constexpr int kMaxOodAttempts = 64;

/// Resample transforms until MSE(x, aug) > threshold; returns the first hit.
/// Threshold <= 0 accepts the first draw. Throws ContractError after
/// kMaxOodAttempts failures.
Image apply_ood(const AugmentationSpec& spec, const Image& x, std::uint64_t seed, double threshold);

// Key-value serialisation under a prefix, e.g. "flow.augment.".
void write_keys(const AugmentationSpec& spec, const std::string& prefix, std::map<std::string, std::string>& out);
AugmentationSpec read_keys(const std::map<std::string, std::string>& in, const std::string& prefix,
                           AugmentationSpec defaults = {});
std::vector<std::string> key_names(const std::string& prefix);

} // namespace hflow::aug
