#pragma once

#include "hflow/augment/augment.hpp"
#include "hflow/numerics/tensor.hpp"

#include <span>
#include <vector>

namespace hflow::eval {

using num::Tensor;

struct DiceResult {
    std::vector<double> per_class; // index = class id, background included
    double mean = 0.0;             // over foreground classes 1..K-1
};

/// Per-class Dice 2|A∩B| / (|A| + |B|) over all elements of two label
/// tensors; a class absent from both scores 1.
DiceResult dice(const Tensor& pred, const Tensor& truth, std::size_t classes);

// 4-neighbour boundary of (mask == cls) in a 1 x 1 x H x W label image.
// Pixels on the image edge count as boundary.
std::vector<std::size_t> boundary_pixels(const Tensor& labels, double cls);

/// 95th percentile (linear interpolation) of the pooled boundary-to-boundary
/// nearest distances in both directions. Throws ContractError when either
/// mask lacks the class.
double hd95(const Tensor& pred, const Tensor& truth, std::size_t cls);

// Percentile of unsorted values with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

/// Normalized 256-bin histogram of integer levels in [0, 255].
std::vector<double> histogram256(const Tensor& images);

/// W1 between two normalized histograms on a unit-spaced grid, in bin units.
double wasserstein_hist(std::span<const double> h1, std::span<const double> h2);

/// Monotone CDF-matching LUT taking `image`'s histogram to `reference`.
/// Each level is placed at its mid-rank quantile, so an image matched to its
/// own histogram is unchanged and a constant image maps to the reference median.
aug::Lut hist_match_lut(const Tensor& image, std::span<const double> reference);
// Per-image histogram matching of a batch.
Tensor hist_match(const Tensor& images, std::span<const double> reference);

/// Average rank of each method over settings (ties share the mean rank,
/// rank 1 is best). `table[m][s]` scores method m in setting s;
/// `higher_better[s]` gives the direction of setting s.
std::vector<double> friedman_rank(const std::vector<std::vector<double>>& table,
                                  const std::vector<bool>& higher_better);

// Mean per-pixel Shannon entropy (nats) of each item of N x K x H x W probabilities.
std::vector<double> mean_entropy(const Tensor& probs);

} // namespace hflow::eval
