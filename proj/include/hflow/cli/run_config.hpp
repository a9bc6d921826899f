#pragma once

#include "hflow/adapt/adapt.hpp"
#include "hflow/augment/augment.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hflow::cli {

/// Every knob of a run. Parsed from a flat "key = value" file; keys not
/// listed in config_keys() are rejected.
struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t image_size = 64;
    std::string output_dir = "run";

    // data.*
    std::size_t sites = 3;
    std::size_t n_per_site = 64;
    std::size_t class_count = 5;

    // flow.*
    std::size_t flow_depth = 12;
    std::vector<std::size_t> flow_widths{16, 32, 48, 64};
    double flow_margin = 1.2;
    double flow_ood_threshold = 100.0;
    double flow_ood_fraction = 0.5;
    std::string flow_dequant = "uniform";
    std::string flow_preprocess = "logit";
    bool flow_guidance = true;
    std::size_t flow_iters = 20000;
    double flow_lr = 1e-3;
    std::size_t flow_lr_decay_period = 2000;
    std::size_t flow_batch = 32;
    aug::AugmentationSpec flow_augment;

    // harmonizer.*
    std::string harm_variant = "unet";
    std::vector<std::size_t> harm_widths{16, 32, 48, 64, 64};
    std::size_t harm_iters = 5000;
    double harm_lr = 1e-3;
    std::size_t harm_lr_decay_period = 500;
    std::size_t harm_batch = 64;
    aug::AugmentationSpec harm_augment;

    // segmenter.* (evaluation task head)
    std::vector<std::size_t> seg_widths{8, 16, 32};
    std::size_t seg_iters = 600;
    double seg_lr = 2e-3;
    std::size_t seg_batch = 8;

    // adapt.*
    double adapt_lr = 5e-7;
    std::size_t adapt_batch = 32;
    std::size_t adapt_max_epochs = 50;
    std::string adapt_stopping = "source-bpd"; // or fixed-steps,N
    double adapt_bpd_tolerance = 0.02;
    std::size_t adapt_patience = 3;
    bool adapt_full_trace = false; // keep adapting to max-epochs after the stop epoch (for stopping comparisons)

    void validate() const;
    // adapt.* as an AdaptConfig (reference BPD left unset).
    adapt::AdaptConfig adapt_config() const;
};

std::vector<std::string> config_keys();

// Fully resolved "key = value" text, one key per line, in config_keys() order.
std::string to_text(const RunConfig& cfg);
// FNV-1a 64 of to_text(cfg), as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin);
// Applies key-values on top of `base`; unknown keys and bad values throw ContractError.
RunConfig apply(RunConfig base, const std::map<std::string, std::string>& kv, const std::string& origin);
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

} // namespace hflow::cli
