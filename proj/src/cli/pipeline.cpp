#include "hflow/cli/pipeline.hpp"

#include "hflow/adapt/adapt.hpp"
#include "hflow/evalbench/dataset_io.hpp"
#include "hflow/evalbench/metrics.hpp"
#include "hflow/evalbench/segmenter.hpp"
#include "hflow/flow/train.hpp"
#include "hflow/harmonizer/harmonizer.hpp"
#include "hflow/numerics/archive.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"
#include "hflow/numerics/text.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fcntl.h>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unistd.h>

#ifndef HFLOW_VERSION
#define HFLOW_VERSION "unknown"
#endif

namespace hflow::cli {

using num::format_double;
using num::Tensor;

namespace {

// Stage tags for seed derivation.
enum : std::uint64_t {
    kFlowInit = 0x1000,
    kFlowTrain = 0x1100,
    kFlowProbe = 0x1200,
    kHarmInit = 0x2000,
    kHarmTrain = 0x2100,
    kSegInit = 0x3000,
    kSegTrain = 0x3100,
    kAdapt = 0x4000,
    kSample = 0x5000,
};

std::uint64_t stage_seed(const RunConfig& cfg, std::uint64_t tag, std::size_t index) {
    return num::derive_seed(cfg.seed, tag + index);
}

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p))
        throw ContractError("missing " + what + ": " + p.string());
}

eval::PhantomDataset load_data(const Paths& paths) {
    require_file(paths.data() / "manifest.txt", "dataset (run gen-data first)");
    return eval::load_dataset(paths.data());
}

bool selected(const std::optional<std::string>& want, const std::string& name) { return !want || *want == name; }

void check_site(const RunConfig& cfg, const std::optional<std::string>& name) {
    if (!name) return;
    const auto names = site_names(cfg);
    if (std::find(names.begin(), names.end(), *name) == names.end())
        throw ContractError("unknown site '" + *name + "'");
}

std::string rel(const Paths& paths, const fs::path& p) { return fs::relative(p, paths.root).generic_string(); }

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
}

Tensor both_splits(const eval::SiteData& site, eval::Split a, eval::Split b) {
    const std::vector<Tensor> parts{site.images_of(a), site.images_of(b)};
    return num::concat_batch(parts);
}

flow::FlowModel load_flow(const Paths& paths, const std::string& site) {
    require_file(paths.flow(site), "flow checkpoint (run train-flow first)");
    return flow::FlowModel::load(paths.flow(site));
}

harm::Harmonizer load_harmonizer(const fs::path& p, const char* hint) {
    require_file(p, std::string("harmonizer checkpoint (run ") + hint + " first)");
    return harm::Harmonizer::load(p);
}

eval::Segmenter load_segmenter(const Paths& paths, const std::string& site) {
    require_file(paths.segmenter(site), "segmenter checkpoint");
    return eval::Segmenter::load(paths.segmenter(site));
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

} // namespace

// ---- run directory ------------------------------------------------------------

RunLock::RunLock(const Paths& paths) : path_(paths.lock()) {
    fs::create_directories(paths.root);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw ContractError("output directory is in use (lock file " + path_.string() +
                            " exists; remove it if no other run is active)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

std::vector<std::string> site_names(const RunConfig& cfg) {
    std::vector<std::string> out;
    for (const auto& s : eval::default_sites(cfg.sites)) out.push_back(s.name);
    return out;
}

std::vector<std::pair<std::string, std::string>> site_pairs(const RunConfig& cfg, const SiteFilter& filter) {
    check_site(cfg, filter.source);
    check_site(cfg, filter.target);
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& s : site_names(cfg))
        for (const auto& t : site_names(cfg))
            if (s != t && selected(filter.source, s) && selected(filter.target, t)) out.emplace_back(s, t);
    return out;
}

void prepare_output(const RunConfig& cfg, const Paths& paths) {
    cfg.validate();
    for (const auto& d : {paths.root, paths.data(), paths.models(), paths.metrics()}) fs::create_directories(d);
    const std::string text = to_text(cfg);
    if (fs::exists(paths.resolved_config())) {
        const auto bytes = num::read_file_bytes(paths.resolved_config());
        if (std::string(bytes.begin(), bytes.end()) != text)
            throw ContractError("output directory " + paths.root.string() +
                                " holds a run with a different configuration; use a fresh --out");
        return;
    }
    num::write_text_atomic(paths.resolved_config(), text);
}

void record_stage(const RunConfig& cfg, const Paths& paths, const StageReport& report) {
    std::map<std::string, std::string> kv;
    if (fs::exists(paths.manifest())) {
        const auto bytes = num::read_file_bytes(paths.manifest());
        kv = parse_key_values(std::string(bytes.begin(), bytes.end()), paths.manifest().string());
    }
    kv["config-hash"] = config_hash(cfg);
    kv["code-version"] = HFLOW_VERSION;
    std::vector<std::string> ck, mt;
    for (const auto& p : report.checkpoints) ck.push_back(rel(paths, p));
    for (const auto& p : report.metrics) mt.push_back(rel(paths, p));
    const std::string prefix = "stage." + report.stage + ".";
    kv[prefix + "seconds"] = format_double(report.seconds);
    kv[prefix + "checkpoints"] = join(ck);
    kv[prefix + "metrics"] = join(mt);
    std::string text = "# run manifest\n";
    for (const auto& [k, v] : kv) text += k + " = " + v + "\n";
    num::write_text_atomic(paths.manifest(), text);
}

// ---- stages -------------------------------------------------------------------

namespace {

// Checkpoints are already on disk; the stage still reports failure.
void throw_if_diverged(const std::string& what, const std::vector<std::string>& sites) {
    if (sites.empty()) return;
    std::string list;
    for (const auto& s : sites) list += (list.empty() ? "" : ", ") + s;
    throw NumericError(what + " training diverged for " + list + "; last good state saved");
}

} // namespace

StageReport gen_data(const RunConfig& cfg, const Paths& paths, const Log& log) {
    Timer timer;
    StageReport r{"gen-data", 0.0, {}, {}};
    eval::PhantomSpec spec;
    spec.size = cfg.image_size;
    spec.classes = cfg.class_count;
    const auto ds = eval::generate(spec, eval::default_sites(cfg.sites), cfg.n_per_site, cfg.seed);
    eval::save_dataset(ds, paths.data());
    r.metrics.push_back(paths.data() / "manifest.txt");
    for (const auto& s : ds.sites)
        log("gen-data: " + s.transform.name + ": " + std::to_string(s.images.n()) + " images");
    r.seconds = timer.seconds();
    return r;
}

StageReport train_flows(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, const Log& log) {
    Timer timer;
    StageReport r{"train-flow", 0.0, {}, {}};
    std::vector<std::string> diverged;
    check_site(cfg, filter.source);
    const auto ds = load_data(paths);
    std::ostringstream summary;
    summary << "site,initial_val_bpd,final_val_bpd,holdout_bpd,augmented_bpd,diverged\n";
    for (std::size_t k = 0; k < ds.sites.size(); ++k) {
        const auto& site = ds.sites[k];
        const std::string name = site.transform.name;
        if (!selected(filter.source, name)) continue;
        flow::FlowConfig fc;
        fc.height = fc.width = cfg.image_size;
        fc.depth = cfg.flow_depth;
        fc.subnet_widths = cfg.flow_widths;
        fc.dequant = flow::dequant_from_name(cfg.flow_dequant);
        fc.preprocess = flow::preprocess_from_name(cfg.flow_preprocess);
        fc.init_seed = stage_seed(cfg, kFlowInit, k);
        flow::FlowModel model(fc);

        flow::FlowTrainConfig tc;
        tc.iterations = cfg.flow_iters;
        tc.batch = cfg.flow_batch;
        tc.adam.learning_rate = cfg.flow_lr;
        tc.adam.decay_period = static_cast<std::int64_t>(cfg.flow_lr_decay_period);
        tc.seed = stage_seed(cfg, kFlowTrain, k);
        tc.guidance.enabled = cfg.flow_guidance;
        tc.guidance.margin = cfg.flow_margin;
        tc.guidance.ood_fraction = cfg.flow_ood_fraction;
        tc.guidance.ood_threshold = cfg.flow_ood_threshold;
        tc.guidance.augment = cfg.flow_augment;

        const Tensor train = site.images_of(eval::Split::Train), val = site.images_of(eval::Split::Val);
        std::ostringstream curve;
        curve << "step,loss,bpd,augmented_bpd\n";
        const std::size_t report_every = std::max<std::size_t>(1, cfg.flow_iters / 10);
        const auto res = flow::train_flow(model, train, val, tc, [&](const flow::FlowCurvePoint& p) {
            curve << p.step << ',' << format_double(p.loss) << ',' << format_double(p.source_bpd) << ','
                  << format_double(p.augmented_bpd) << '\n';
            if (p.step % report_every == 0)
                log("train-flow " + name + ": step " + std::to_string(p.step) + " bpd " + format_double(p.source_bpd));
        });
        if (res.diverged) {
            log("train-flow " + name + ": diverged (" + res.message + "); kept last good state");
            diverged.push_back(name);
        }

        // Held-out check of the guided objective: OOD augmentations of the
        // test split should be less likely than the images themselves.
        const Tensor holdout = site.images_of(eval::Split::Test);
        std::vector<Tensor> augmented;
        for (std::size_t i = 0; i < holdout.n(); ++i)
            augmented.push_back(aug::apply_ood(cfg.flow_augment, num::slice_batch(holdout, i, i + 1),
                                               num::derive_seed(stage_seed(cfg, kFlowProbe, k), i),
                                               cfg.flow_ood_threshold));
        const double holdout_bpd = flow::mean_bpd(model, holdout);
        const double augmented_bpd = flow::mean_bpd(model, num::concat_batch(augmented));

        model.save(paths.flow(name));
        num::write_text_atomic(paths.flow_curve(name), curve.str());
        summary << name << ',' << format_double(res.initial_val_bpd) << ',' << format_double(res.final_val_bpd) << ','
                << format_double(holdout_bpd) << ',' << format_double(augmented_bpd) << ',' << (res.diverged ? 1 : 0)
                << '\n';
        r.checkpoints.push_back(paths.flow(name));
        r.metrics.push_back(paths.flow_curve(name));
        log("train-flow " + name + ": val bpd " + format_double(res.final_val_bpd) + ", holdout " +
            format_double(holdout_bpd) + ", augmented " + format_double(augmented_bpd));
    }
    if (!filter.source) {
        num::write_text_atomic(paths.metrics() / "flow-summary.csv", summary.str());
        r.metrics.push_back(paths.metrics() / "flow-summary.csv");
    }
    throw_if_diverged("flow", diverged);
    r.seconds = timer.seconds();
    return r;
}

StageReport train_harmonizers(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, const Log& log) {
    Timer timer;
    StageReport r{"train-harmonizer", 0.0, {}, {}};
    std::vector<std::string> diverged;
    check_site(cfg, filter.source);
    const auto ds = load_data(paths);
    for (std::size_t k = 0; k < ds.sites.size(); ++k) {
        const auto& site = ds.sites[k];
        const std::string name = site.transform.name;
        if (!selected(filter.source, name)) continue;
        harm::HarmonizerConfig hc;
        hc.variant = harm::variant_from_name(cfg.harm_variant);
        hc.widths = cfg.harm_widths;
        hc.init_seed = stage_seed(cfg, kHarmInit, k);
        harm::Harmonizer h(hc);

        harm::PretrainConfig pc;
        pc.iterations = cfg.harm_iters;
        pc.batch = cfg.harm_batch;
        pc.adam.learning_rate = cfg.harm_lr;
        pc.adam.decay_period = static_cast<std::int64_t>(cfg.harm_lr_decay_period);
        pc.seed = stage_seed(cfg, kHarmTrain, k);
        pc.augment = cfg.harm_augment;

        std::ostringstream curve;
        curve << "step,train_loss,val_loss\n";
        const std::size_t report_every = std::max<std::size_t>(1, cfg.harm_iters / 5);
        const auto res = harm::pretrain(h, site.images_of(eval::Split::Train), site.images_of(eval::Split::Val), pc,
                                        [&](const harm::PretrainPoint& p) {
                                            curve << p.step << ',' << format_double(p.train_loss) << ','
                                                  << format_double(p.val_loss) << '\n';
                                            if (p.step % report_every == 0)
                                                log("train-harmonizer " + name + ": step " + std::to_string(p.step) +
                                                    " loss " + format_double(p.train_loss));
                                        });
        if (res.diverged) {
            log("train-harmonizer " + name + ": diverged (" + res.message + ")");
            diverged.push_back(name);
        }
        h.save(paths.harmonizer(name));
        num::write_text_atomic(paths.harmonizer_curve(name), curve.str());
        r.checkpoints.push_back(paths.harmonizer(name));
        r.metrics.push_back(paths.harmonizer_curve(name));
        log("train-harmonizer " + name + ": best val loss " + format_double(res.best_val_loss) + " at step " +
            std::to_string(res.best_step));
    }
    throw_if_diverged("harmonizer", diverged);
    r.seconds = timer.seconds();
    return r;
}

StageReport train_segmenters(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, const Log& log) {
    Timer timer;
    StageReport r{"train-segmenter", 0.0, {}, {}};
    check_site(cfg, filter.source);
    const auto ds = load_data(paths);
    for (std::size_t k = 0; k < ds.sites.size(); ++k) {
        const auto& site = ds.sites[k];
        const std::string name = site.transform.name;
        if (!selected(filter.source, name) || fs::exists(paths.segmenter(name))) continue;
        eval::SegmenterConfig sc;
        sc.classes = cfg.class_count;
        sc.widths = cfg.seg_widths;
        sc.init_seed = stage_seed(cfg, kSegInit, k);
        eval::Segmenter seg(sc);
        eval::SegTrainConfig tc;
        tc.iterations = cfg.seg_iters;
        tc.batch = cfg.seg_batch;
        tc.adam.learning_rate = cfg.seg_lr;
        tc.seed = stage_seed(cfg, kSegTrain, k);
        const auto res = eval::train_segmenter(seg, site.images_of(eval::Split::Train),
                                               site.masks_of(eval::Split::Train), tc);
        if (res.diverged) throw NumericError("segmenter for " + name + " diverged: " + res.message);
        seg.save(paths.segmenter(name));
        r.checkpoints.push_back(paths.segmenter(name));
        const auto ev = eval::evaluate_segmentation(seg, site.images_of(eval::Split::Val), site.masks_of(eval::Split::Val));
        log("train-segmenter " + name + ": val dice " + format_double(ev.dice));
    }
    r.seconds = timer.seconds();
    return r;
}

StageReport adapt_pairs(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, const Log& log) {
    Timer timer;
    StageReport r{"adapt", 0.0, {}, {}};
    const auto pairs = site_pairs(cfg, filter);
    const auto ds = load_data(paths);
    for (const auto& [src, tgt] : pairs) {
        flow::FlowModel model = load_flow(paths, src);
        const auto flow_bytes = num::read_file_bytes(paths.flow(src));
        harm::Harmonizer h = load_harmonizer(paths.harmonizer(src), "train-harmonizer");
        const eval::Segmenter seg = load_segmenter(paths, src);
        const auto& target = ds.site(tgt);

        adapt::AdaptConfig ac = cfg.adapt_config();
        ac.source_bpd_reference = model.reference_bpd;
        const std::size_t pair_index = ds.site_index(src) * 8 + ds.site_index(tgt);
        ac.seed = stage_seed(cfg, kAdapt, pair_index);
        const Tensor test_images = target.images_of(eval::Split::Test), test_masks = target.masks_of(eval::Split::Test);
        adapt::Probes probes{&seg, &test_images, &test_masks};
        const auto trace = adapt::adapt(h, model, both_splits(target, eval::Split::Train, eval::Split::Val), ac, probes);

        // The flow on disk and in memory must be untouched.
        if (num::read_file_bytes(paths.flow(src)) != flow_bytes ||
            num::encode_archive(model.to_archive()) != flow_bytes)
            throw NumericError("adapt " + src + " -> " + tgt + ": flow checkpoint changed during adaptation");

        h.save(paths.adapted(src, tgt));
        num::write_text_atomic(paths.adapt_trace(src, tgt), trace.csv());

        std::ostringstream stops;
        stops << "criterion,epoch,reached,bpd,entropy,dice\n";
        auto row = [&](const std::string& name, const adapt::StopDecision& d) {
            const auto& rec = trace.at_epoch(d.epoch);
            stops << name << ',' << d.epoch << ',' << (d.reached ? 1 : 0) << ',' << format_double(rec.bpd) << ','
                  << format_double(rec.entropy) << ',' << format_double(rec.dice) << '\n';
        };
        row("selected", trace.stop);
        row("source-bpd", adapt::stop_source_bpd(trace.records, ac.source_bpd_reference, ac.bpd_tolerance));
        row("entropy", adapt::stop_entropy(trace.records, ac.entropy_patience));
        row("oracle-dice", adapt::stop_oracle_dice(trace.records));
        num::write_text_atomic(paths.adapt_stops(src, tgt), stops.str());

        r.checkpoints.push_back(paths.adapted(src, tgt));
        r.metrics.push_back(paths.adapt_trace(src, tgt));
        r.metrics.push_back(paths.adapt_stops(src, tgt));
        const auto& first = trace.records.front();
        const auto& chosen = trace.at_epoch(trace.stop.epoch);
        log("adapt " + src + " -> " + tgt + ": " + std::string(adapt::stopping_name(ac.stopping)) + " stop at epoch " +
            std::to_string(trace.stop.epoch) + (trace.stop.reached ? "" : " (criterion not reached)") + ", bpd " +
            format_double(first.bpd) + " -> " + format_double(chosen.bpd) + " (source " +
            format_double(ac.source_bpd_reference) + ")" + (trace.aborted ? ", aborted: " + trace.message : ""));
    }
    r.seconds = timer.seconds();
    return r;
}

// ---- evaluation ---------------------------------------------------------------

namespace {

EvalRow score(const std::string& method, const std::string& src, const std::string& tgt, const eval::Segmenter& seg,
              const Tensor& images, const Tensor& masks, const std::vector<double>& source_hist) {
    const auto ev = eval::evaluate_segmentation(seg, images, masks);
    EvalRow row;
    row.method = method;
    row.source = src;
    row.target = tgt;
    row.dice = ev.dice;
    row.hd95 = ev.hd95;
    row.hd95_missing = ev.hd95_missing;
    row.wd = eval::wasserstein_hist(eval::histogram256(images), source_hist);
    return row;
}

} // namespace

EvalTable evaluate(const RunConfig& cfg, const Paths& paths, bool no_harmonize, const SiteFilter& filter,
                   StageReport* report, const Log& log) {
    Timer timer;
    const auto ds = load_data(paths);
    const auto pairs = site_pairs(cfg, filter);
    EvalTable table;
    table.methods = {"baseline", "hist-match"};
    if (!no_harmonize) {
        table.methods.push_back("pretrained");
        table.methods.push_back("harmonizing-flows");
    }
    // Check every input up front so a missing artifact fails before any work.
    std::vector<std::string> sources;
    for (const auto& [s, t] : pairs) {
        if (std::find(sources.begin(), sources.end(), s) == sources.end()) sources.push_back(s);
        require_file(paths.segmenter(s), "segmenter checkpoint (run adapt first)");
        if (!no_harmonize) {
            require_file(paths.harmonizer(s), "harmonizer checkpoint (run train-harmonizer first, or pass --no-harmonize)");
            require_file(paths.adapted(s, t), "adapted harmonizer (run adapt first, or pass --no-harmonize)");
        }
    }

    std::map<std::string, eval::Segmenter> segs;
    for (const auto& s : sources) {
        segs.emplace(s, load_segmenter(paths, s));
        const auto& site = ds.site(s);
        const Tensor img = site.images_of(eval::Split::Test);
        table.rows.push_back(score("oracle", s, s, segs.at(s), img, site.masks_of(eval::Split::Test),
                                   eval::histogram256(img)));
    }
    for (const auto& [s, t] : pairs) {
        const auto& seg = segs.at(s);
        const auto& source = ds.site(s);
        const auto& target = ds.site(t);
        const auto source_hist = eval::histogram256(source.images_of(eval::Split::Test));
        const Tensor x = target.images_of(eval::Split::Test), m = target.masks_of(eval::Split::Test);
        table.rows.push_back(score("baseline", s, t, seg, x, m, source_hist));
        const auto ref = eval::histogram256(source.images_of(eval::Split::Train));
        table.rows.push_back(score("hist-match", s, t, seg, eval::hist_match(x, ref), m, source_hist));
        if (!no_harmonize) {
            const auto pre = harm::Harmonizer::load(paths.harmonizer(s));
            table.rows.push_back(score("pretrained", s, t, seg, adapt::harmonize_levels(pre, x), m, source_hist));
            const auto ada = harm::Harmonizer::load(paths.adapted(s, t));
            table.rows.push_back(score("harmonizing-flows", s, t, seg, adapt::harmonize_levels(ada, x), m, source_hist));
        }
        log("evaluate " + s + " -> " + t + ": done");
    }

    // Friedman ranks over every (pair, metric) column of the table.
    const double worst_hd = std::sqrt(2.0) * static_cast<double>(cfg.image_size);
    std::vector<std::vector<double>> ranks_in(table.methods.size());
    std::vector<bool> higher;
    for (const auto& [s, t] : pairs) {
        for (int metric = 0; metric < 3; ++metric) {
            higher.push_back(metric == 0);
            for (std::size_t mi = 0; mi < table.methods.size(); ++mi) {
                for (const auto& row : table.rows) {
                    if (row.method != table.methods[mi] || row.source != s || row.target != t) continue;
                    const double v = metric == 0 ? row.dice : metric == 1 ? (std::isnan(row.hd95) ? worst_hd : row.hd95)
                                                                          : row.wd;
                    ranks_in[mi].push_back(v);
                }
            }
        }
    }
    if (!pairs.empty()) table.friedman = eval::friedman_rank(ranks_in, higher);

    std::ostringstream csv;
    csv << "method,source,target,dice,hd95,hd95_missing,wd\n";
    for (const auto& row : table.rows)
        csv << row.method << ',' << row.source << ',' << row.target << ',' << format_double(row.dice) << ','
            << format_double(row.hd95) << ',' << row.hd95_missing << ',' << format_double(row.wd) << '\n';
    std::ostringstream fr;
    fr << "method,mean_dice,mean_hd95,mean_wd,friedman_rank\n";
    for (std::size_t mi = 0; mi < table.methods.size(); ++mi) {
        std::vector<double> d, h, w;
        for (const auto& row : table.rows)
            if (row.method == table.methods[mi]) {
                d.push_back(row.dice);
                if (!std::isnan(row.hd95)) h.push_back(row.hd95);
                w.push_back(row.wd);
            }
        fr << table.methods[mi] << ',' << format_double(mean_of(d)) << ',' << format_double(mean_of(h)) << ','
           << format_double(mean_of(w)) << ',' << format_double(table.friedman.empty() ? std::nan("") : table.friedman[mi])
           << '\n';
    }
    num::write_text_atomic(paths.evaluation(), csv.str());
    num::write_text_atomic(paths.friedman(), fr.str());
    if (report) {
        report->stage = "evaluate";
        report->metrics = {paths.evaluation(), paths.friedman()};
        report->seconds = timer.seconds();
    }
    return table;
}

std::string format_table(const EvalTable& table) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %-8s %-8s %8s %8s %8s\n", "method", "source", "target", "dice", "hd95", "wd");
    os << line;
    for (const auto& r : table.rows) {
        std::snprintf(line, sizeof line, "%-18s %-8s %-8s %8.4f %8.3f %8.3f\n", r.method.c_str(), r.source.c_str(),
                      r.target.c_str(), r.dice, r.hd95, r.wd);
        os << line;
    }
    os << "friedman rank:";
    for (std::size_t i = 0; i < table.friedman.size(); ++i) {
        std::snprintf(line, sizeof line, " %s %.3f", table.methods[i].c_str(), table.friedman[i]);
        os << line;
    }
    os << '\n';
    return os.str();
}

StageReport sample(const RunConfig& cfg, const Paths& paths, const SiteFilter& filter, std::size_t count,
                   const Log& log) {
    Timer timer;
    StageReport r{"sample", 0.0, {}, {}};
    check_site(cfg, filter.source);
    if (count == 0) throw ContractError("sample: count must be positive");
    const auto ds = load_data(paths);
    for (std::size_t k = 0; k < ds.sites.size(); ++k) {
        const std::string name = ds.sites[k].transform.name;
        if (!selected(filter.source, name)) continue;
        const auto model = load_flow(paths, name);
        Tensor x = model.sample(count, stage_seed(cfg, kSample, k));
        for (double& v : x.storage()) v = std::clamp(std::floor(v), 0.0, 255.0);
        const fs::path dir = paths.samples() / name;
        fs::create_directories(dir);
        for (std::size_t i = 0; i < count; ++i) {
            char file[32];
            std::snprintf(file, sizeof file, "%04zu.pgm", i);
            eval::write_pgm(dir / file, num::slice_batch(x, i, i + 1));
        }
        std::ostringstream csv;
        csv << "site,wd_to_samples\n";
        const auto hs = eval::histogram256(x);
        for (const auto& other : ds.sites)
            csv << other.transform.name << ','
                << format_double(eval::wasserstein_hist(hs, eval::histogram256(other.images_of(eval::Split::Test))))
                << '\n';
        num::write_text_atomic(paths.sample_stats(name), csv.str());
        r.metrics.push_back(paths.sample_stats(name));
        log("sample " + name + ": " + std::to_string(count) + " images in " + dir.string());
    }
    r.seconds = timer.seconds();
    return r;
}

} // namespace hflow::cli
