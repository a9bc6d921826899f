#pragma once

#include "hflow/evalbench/phantom.hpp"

#include <filesystem>

namespace hflow::eval {

// Binary 8-bit PGM (P5) for one 1 x 1 x H x W image of integer levels.
void write_pgm(const std::filesystem::path& path, const Tensor& image);
Tensor read_pgm(const std::filesystem::path& path);

/// Directory layout:
///   manifest.txt                 spec, seed, per-site transform (knots + 256-entry LUT), splits
///   <site>/images/NNNN.pgm
///   <site>/masks/NNNN.pgm        class ids
/// Rewriting the same dataset produces identical bytes.
void save_dataset(const PhantomDataset& ds, const std::filesystem::path& dir);
PhantomDataset load_dataset(const std::filesystem::path& dir);

} // namespace hflow::eval
