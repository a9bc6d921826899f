// hflow: data generation, training, adaptation and evaluation of a
// harmonizing-flows run. Every stage reads and writes artifacts under --out.
#include "hflow/cli/pipeline.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/text.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <malloc.h>

namespace cli = hflow::cli;

namespace {

// Large temporaries are allocated and freed every training step; keep them
// on the heap instead of returning them to the kernel each time.
void tune_allocator() {
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    mallopt(M_TOP_PAD, 64 << 20);
}

} // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Harmonizing flows: site harmonization with normalizing-flow guided adaptation"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "run seed (overrides the config)");
    app.add_option("--out", out_dir, "output directory (overrides output-dir)");

    cli::SiteFilter filter;
    auto add_filters = [&](CLI::App* sub, bool with_target) {
        sub->add_option("--source", filter.source, "only this source site");
        if (with_target) sub->add_option("--target", filter.target, "only this target site");
    };
    auto* gen = app.add_subcommand("gen-data", "generate the multi-site phantom dataset");
    auto* tf = app.add_subcommand("train-flow", "train the source-domain flows (guided objective)");
    add_filters(tf, false);
    auto* th = app.add_subcommand("train-harmonizer", "pretrain the harmonizers on augmented source images");
    add_filters(th, false);
    auto* ad = app.add_subcommand("adapt", "adapt each harmonizer to each target site with its frozen flow");
    add_filters(ad, true);
    bool no_harmonize = false;
    auto* ev = app.add_subcommand("evaluate", "segmentation and histogram metrics for every method and site pair");
    add_filters(ev, true);
    ev->add_flag("--no-harmonize", no_harmonize, "only the baseline, hist-match and oracle rows");
    std::size_t count = 8;
    auto* sm = app.add_subcommand("sample", "draw images from the trained flows");
    add_filters(sm, false);
    sm->add_option("--count", count, "images per site")->check(CLI::PositiveNumber);
    (void)gen;

    CLI11_PARSE(app, argc, argv);

    auto log = [](const std::string& line) { std::cout << line << std::endl; };
    try {
        cli::RunConfig cfg = config_path.empty() ? cli::RunConfig{} : cli::load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        const cli::Paths paths{cfg.output_dir};
        cli::prepare_output(cfg, paths);
        cli::RunLock lock(paths);

        auto run = [&](const cli::StageReport& r) {
            cli::record_stage(cfg, paths, r);
            log(r.stage + ": " + hflow::num::format_double(r.seconds) + " s");
        };
        if (*gen) run(cli::gen_data(cfg, paths, log));
        if (*tf) run(cli::train_flows(cfg, paths, filter, log));
        if (*th) run(cli::train_harmonizers(cfg, paths, filter, log));
        // Segmenters are trained on first use; later calls find them on disk.
        auto segmenters = [&] {
            const auto r = cli::train_segmenters(cfg, paths, filter, log);
            if (!r.checkpoints.empty()) run(r);
        };
        if (*ad) {
            segmenters();
            run(cli::adapt_pairs(cfg, paths, filter, log));
        }
        if (*ev) {
            segmenters();
            cli::StageReport r;
            const auto table = cli::evaluate(cfg, paths, no_harmonize, filter, &r, log);
            std::cout << cli::format_table(table);
            run(r);
        }
        if (*sm) run(cli::sample(cfg, paths, filter, count, log));
    } catch (const std::exception& e) {
        std::cerr << "hflow: error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
