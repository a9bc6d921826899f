#pragma once

#include "hflow/augment/augment.hpp"
#include "hflow/numerics/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hflow::eval {

using num::Tensor;

struct Band {
    double lo;
    double hi;
};

/// Anatomy and base-appearance parameters shared by all sites.
struct PhantomSpec {
    std::size_t size = 64;    // images are size x size, divisible by 16
    std::size_t classes = 5;  // including background; 2..5
    std::vector<Band> bands;  // per-class base intensity band; default_bands(classes) when empty
    double smoothing_sigma = 3.0; // blob noise filter width in pixels at 64x64 (scaled with size)
    double noise_sigma = 0.0;     // base texture noise, before the site transform

    void validate() const;
    std::vector<Band> resolved_bands() const;
};

std::vector<Band> default_bands(std::size_t classes);

/// Site appearance: I = round(map(base) * bias + noise), clamped to [0, 255].
struct SiteTransform {
    std::string name;
    aug::MonotoneMap map{{0.0, 255.0}, {0.0, 255.0}};
    double noise_sigma = 0.5;
    double bias_amplitude = 0.0; // bias field in [1 - a, 1 + a], a < 1

    void validate() const;
};

// Label map and per-class base intensities of one subject.
struct Anatomy {
    Tensor labels; // 1 x 1 x H x W, integer class ids
    std::vector<double> intensity; // per class, inside its band
};

Anatomy sample_anatomy(const PhantomSpec& spec, std::uint64_t seed);

// Base rendering: class intensity plus base texture noise (unclamped).
Tensor base_image(const PhantomSpec& spec, const Anatomy& a, std::uint64_t noise_seed);
// Full site rendering of one subject (1 x 1 x H x W, integer levels).
Tensor render(const PhantomSpec& spec, const Anatomy& a, const SiteTransform& site, std::uint64_t noise_seed);

enum class Split { Train, Val, Test };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct SiteData {
    SiteTransform transform;
    Tensor images; // N x 1 x H x W
    Tensor masks;  // N x 1 x H x W
    std::vector<Split> split;

    Tensor images_of(Split s) const;
    Tensor masks_of(Split s) const;
    std::vector<std::size_t> indices_of(Split s) const;
};

struct PhantomDataset {
    PhantomSpec spec;
    std::uint64_t seed = 0;
    std::vector<SiteData> sites;

    const SiteData& site(const std::string& name) const;
    std::size_t site_index(const std::string& name) const;
};

// 60 / 15 / 25 split counts for n subjects (train, val, test).
struct SplitCounts {
    std::size_t train, val, test;
};
SplitCounts split_counts(std::size_t n);

/// Each site gets its own subjects (no traveling subjects): subject i of
/// site k uses anatomy seed derive_seed(seed, k * n + i).
PhantomDataset generate(const PhantomSpec& spec, const std::vector<SiteTransform>& sites, std::size_t n_per_site,
                        std::uint64_t seed);

/// The three reference sites: "site-a" (near identity), "site-b" (brightening
/// contrast shift, strong bias field), "site-c" (darkening, compressed range).
std::vector<SiteTransform> default_sites();
// The first `count` sites of default_sites() (count in 1..3).
std::vector<SiteTransform> default_sites(std::size_t count);

} // namespace hflow::eval
