#pragma once

#include "hflow/cli/run_config.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hflow::cli {

namespace fs = std::filesystem;

/// Artifact layout under the output directory. Every stage reads its inputs
/// and writes its outputs through these paths only.
struct Paths {
    fs::path root;

    fs::path data() const { return root / "data"; }
    fs::path models() const { return root / "models"; }
    fs::path metrics() const { return root / "metrics"; }
    fs::path samples() const { return root / "samples"; }
    fs::path manifest() const { return root / "manifest.txt"; }
    fs::path resolved_config() const { return root / "config.resolved"; }
    fs::path lock() const { return root / ".lock"; }

    fs::path flow(const std::string& site) const { return models() / ("flow-" + site + ".hflw"); }
    fs::path harmonizer(const std::string& site) const { return models() / ("harmonizer-" + site + ".hflw"); }
    fs::path segmenter(const std::string& site) const { return models() / ("segmenter-" + site + ".hflw"); }
    fs::path adapted(const std::string& src, const std::string& tgt) const {
        return models() / ("adapted-" + src + "-to-" + tgt + ".hflw");
    }
    fs::path flow_curve(const std::string& site) const { return metrics() / ("flow-" + site + ".csv"); }
    fs::path harmonizer_curve(const std::string& site) const { return metrics() / ("harmonizer-" + site + ".csv"); }
    fs::path adapt_trace(const std::string& src, const std::string& tgt) const {
        return metrics() / ("adapt-" + src + "-to-" + tgt + ".csv");
    }
    fs::path adapt_stops(const std::string& src, const std::string& tgt) const {
        return metrics() / ("adapt-" + src + "-to-" + tgt + "-stops.csv");
    }
    fs::path evaluation() const { return metrics() / "evaluation.csv"; }
    fs::path friedman() const { return metrics() / "friedman.csv"; }
    fs::path sample_stats(const std::string& site) const { return metrics() / ("samples-" + site + ".csv"); }
};

// Exclusive writer lock on an output directory (removed on destruction).
class RunLock {
public:
    explicit RunLock(const Paths& paths);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

struct StageReport {
    std::string stage;
    double seconds = 0.0;
    std::vector<fs::path> checkpoints;
    std::vector<fs::path> metrics;
};

using Log = std::function<void(const std::string&)>;

// Selects a subset of sites by name; empty means all.
struct SiteFilter {
    std::optional<std::string> source;
    std::optional<std::string> target;
};

/// Writes config.resolved and checks that an existing run directory was
/// produced by the same configuration.
void prepare_output(const RunConfig& cfg, const Paths& paths);
// Merges the stage into manifest.txt (written atomically).
void record_stage(const RunConfig& cfg, const Paths& paths, const StageReport& report);

std::vector<std::string> site_names(const RunConfig& cfg);

StageReport gen_data(const RunConfig& cfg, const Paths& paths, const Log& log);
StageReport train_flows(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, const Log& log);
StageReport train_harmonizers(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, const Log& log);
// Trains the source segmenters that are missing (evaluation task heads).
StageReport train_segmenters(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, const Log& log);
StageReport adapt_pairs(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, const Log& log);

struct EvalRow {
    std::string method;
    std::string source;
    std::string target;
    double dice = 0.0;
    double hd95 = 0.0;
    std::size_t hd95_missing = 0;
    double wd = 0.0;
};

struct EvalTable {
    std::vector<EvalRow> rows;
    std::vector<std::string> methods; // ranked methods, in table order
    std::vector<double> friedman;     // per method
};

/// Segmentation and histogram metrics of every method on the test split of
/// every ordered (source, target) pair, plus the source oracle rows. With
/// `no_harmonize` only the baseline, hist-match and oracle rows are produced.
EvalTable evaluate(const RunConfig& cfg, const Paths& paths, bool no_harmonize, const SiteFilter& filter,
                   StageReport* report, const Log& log);
std::string format_table(const EvalTable& table);

StageReport sample(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, std::size_t count,
                   const Log& log);

// Pairs used by adapt and evaluate.
std::vector<std::pair<std::string, std::string>> site_pairs(const RunConfig& cfg, const SiteFilter& filter);

} // namespace hflow::cli
