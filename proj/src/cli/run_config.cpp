#include "hflow/cli/run_config.hpp"

#include "hflow/flow/flow_model.hpp"
#include "hflow/harmonizer/harmonizer.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/text.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace hflow::cli {

namespace {

struct Key {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string widths_text(const std::vector<std::size_t>& w) {
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
    return s;
}

std::vector<std::size_t> parse_widths(const std::string& v, const std::string& key) {
    std::vector<std::size_t> out;
    for (const auto& p : num::split(v, ',')) {
        const auto w = num::parse_uint(p, key);
        if (w == 0) throw ContractError(key + ": widths must be positive");
        out.push_back(w);
    }
    if (out.empty()) throw ContractError(key + ": needs at least one width");
    return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
    const std::string t = num::trim(v);
    if (t == "true" || t == "1" || t == "on") return true;
    if (t == "false" || t == "0" || t == "off") return false;
    throw ContractError(key + ": '" + v + "' is not a boolean");
}

template <class T>
Key uint_key(std::string name, T RunConfig::*field) {
    return {name, [field](const RunConfig& c) { return std::to_string(c.*field); },
            [field, name](RunConfig& c, const std::string& v) { c.*field = static_cast<T>(num::parse_uint(v, name)); }};
}

Key real_key(std::string name, double RunConfig::*field) {
    return {name, [field](const RunConfig& c) { return num::format_double(c.*field); },
            [field, name](RunConfig& c, const std::string& v) { c.*field = num::parse_double(v, name); }};
}

Key bool_key(std::string name, bool RunConfig::*field) {
    return {name, [field](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); },
            [field, name](RunConfig& c, const std::string& v) { c.*field = parse_bool(v, name); }};
}

Key text_key(std::string name, std::string RunConfig::*field) {
    return {name, [field](const RunConfig& c) { return c.*field; },
            [field](RunConfig& c, const std::string& v) { c.*field = num::trim(v); }};
}

Key widths_key(std::string name, std::vector<std::size_t> RunConfig::*field) {
    return {name, [field](const RunConfig& c) { return widths_text(c.*field); },
            [field, name](RunConfig& c, const std::string& v) { c.*field = parse_widths(v, name); }};
}

void add_augment_keys(std::vector<Key>& keys, const std::string& prefix, aug::AugmentationSpec RunConfig::*field) {
    for (const auto& name : aug::key_names(prefix)) {
        keys.push_back({name,
                        [field, name, prefix](const RunConfig& c) {
                            std::map<std::string, std::string> kv;
                            aug::write_keys(c.*field, prefix, kv);
                            return kv.at(name);
                        },
                        [field, name, prefix](RunConfig& c, const std::string& v) {
                            c.*field = aug::read_keys({{name, num::trim(v)}}, prefix, c.*field);
                        }});
    }
}

const std::vector<Key>& keys() {
    static const std::vector<Key> table = [] {
        std::vector<Key> k;
        k.push_back(uint_key("seed", &RunConfig::seed));
        k.push_back(uint_key("image-size", &RunConfig::image_size));
        k.push_back(text_key("output-dir", &RunConfig::output_dir));
        k.push_back(uint_key("data.sites", &RunConfig::sites));
        k.push_back(uint_key("data.n-per-site", &RunConfig::n_per_site));
        k.push_back(uint_key("data.class-count", &RunConfig::class_count));
        k.push_back(uint_key("flow.depth", &RunConfig::flow_depth));
        k.push_back(widths_key("flow.widths", &RunConfig::flow_widths));
        k.push_back(real_key("flow.margin-c", &RunConfig::flow_margin));
        k.push_back(real_key("flow.ood-threshold", &RunConfig::flow_ood_threshold));
        k.push_back(real_key("flow.ood-fraction", &RunConfig::flow_ood_fraction));
        k.push_back(text_key("flow.dequant-mode", &RunConfig::flow_dequant));
        k.push_back(text_key("flow.preprocess", &RunConfig::flow_preprocess));
        k.push_back(bool_key("flow.guidance", &RunConfig::flow_guidance));
        k.push_back(uint_key("flow.iters", &RunConfig::flow_iters));
        k.push_back(real_key("flow.lr", &RunConfig::flow_lr));
        k.push_back(uint_key("flow.lr-decay-period", &RunConfig::flow_lr_decay_period));
        k.push_back(uint_key("flow.batch", &RunConfig::flow_batch));
        add_augment_keys(k, "flow.augment.", &RunConfig::flow_augment);
        k.push_back(text_key("harmonizer.variant", &RunConfig::harm_variant));
        k.push_back(widths_key("harmonizer.widths", &RunConfig::harm_widths));
        k.push_back(uint_key("harmonizer.iters", &RunConfig::harm_iters));
        k.push_back(real_key("harmonizer.lr", &RunConfig::harm_lr));
        k.push_back(uint_key("harmonizer.lr-decay-period", &RunConfig::harm_lr_decay_period));
        k.push_back(uint_key("harmonizer.batch", &RunConfig::harm_batch));
        add_augment_keys(k, "harmonizer.augment.", &RunConfig::harm_augment);
        k.push_back(widths_key("segmenter.widths", &RunConfig::seg_widths));
        k.push_back(uint_key("segmenter.iters", &RunConfig::seg_iters));
        k.push_back(real_key("segmenter.lr", &RunConfig::seg_lr));
        k.push_back(uint_key("segmenter.batch", &RunConfig::seg_batch));
        k.push_back(real_key("adapt.lr", &RunConfig::adapt_lr));
        k.push_back(uint_key("adapt.batch", &RunConfig::adapt_batch));
        k.push_back(uint_key("adapt.max-epochs", &RunConfig::adapt_max_epochs));
        k.push_back(text_key("adapt.stopping", &RunConfig::adapt_stopping));
        k.push_back(real_key("adapt.bpd-tolerance", &RunConfig::adapt_bpd_tolerance));
        k.push_back(uint_key("adapt.entropy-patience", &RunConfig::adapt_patience));
        k.push_back(bool_key("adapt.full-trace", &RunConfig::adapt_full_trace));
        return k;
    }();
    return table;
}

} // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& k : keys()) out.push_back(k.name);
    return out;
}

void RunConfig::validate() const {
    if (image_size < 16 || image_size % 16 != 0) throw ContractError("image-size must be a positive multiple of 16");
    if (sites < 2 || sites > 3) throw ContractError("data.sites must be 2 or 3");
    if (n_per_site < 8) throw ContractError("data.n-per-site must be at least 8");
    if (class_count < 2 || class_count > 5) throw ContractError("data.class-count must be in 2..5");
    if (flow_depth == 0 || flow_depth % 3 != 0) throw ContractError("flow.depth must be a positive multiple of 3");
    if (!(flow_margin > 0.0)) throw ContractError("flow.margin-c must be positive");
    if (!(flow_ood_fraction >= 0.0 && flow_ood_fraction < 1.0)) throw ContractError("flow.ood-fraction must be in [0, 1)");
    flow::dequant_from_name(flow_dequant);
    flow::preprocess_from_name(flow_preprocess);
    if (flow_batch == 0 || harm_batch == 0 || seg_batch == 0 || adapt_batch == 0)
        throw ContractError("batch sizes must be positive");
    if (!(flow_lr > 0.0) || !(harm_lr > 0.0) || !(seg_lr > 0.0)) throw ContractError("learning rates must be positive");
    if (flow_lr_decay_period == 0 || harm_lr_decay_period == 0) throw ContractError("lr decay periods must be positive");
    harm::variant_from_name(harm_variant);
    if (image_size % (std::size_t{1} << (harm_widths.size() - 1)) != 0)
        throw ContractError("harmonizer.widths has too many scales for image-size " + std::to_string(image_size));
    flow_augment.validate();
    harm_augment.validate();
    adapt_config().validate();
}

adapt::AdaptConfig RunConfig::adapt_config() const {
    adapt::AdaptConfig a;
    a.learning_rate = adapt_lr;
    a.batch = adapt_batch;
    a.max_epochs = adapt_max_epochs;
    a.bpd_tolerance = adapt_bpd_tolerance;
    a.entropy_patience = adapt_patience;
    a.full_trace = adapt_full_trace;
    const auto parts = num::split(adapt_stopping, ',');
    a.stopping = adapt::stopping_from_name(num::trim(parts.empty() ? std::string() : parts[0]));
    if (a.stopping == adapt::Stopping::FixedSteps) {
        if (parts.size() != 2) throw ContractError("adapt.stopping: fixed-steps needs an epoch count, e.g. fixed-steps,10");
        a.fixed_epochs = num::parse_uint(parts[1], "adapt.stopping epochs");
    } else if (parts.size() != 1) {
        throw ContractError("adapt.stopping: only fixed-steps takes an argument");
    }
    // The reference comes from the flow checkpoint; use a placeholder so the
    // remaining fields can be validated here.
    a.source_bpd_reference = 0.0;
    return a;
}

std::string to_text(const RunConfig& cfg) {
    std::string s;
    for (const auto& k : keys()) s += k.name + " = " + k.get(cfg) + "\n";
    return s;
}

std::string config_hash(const RunConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : to_text(cfg)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = num::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = num::trim(line.substr(0, eq));
        if (kv.count(key)) throw ContractError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        kv[key] = num::trim(line.substr(eq + 1));
    }
    return kv;
}

RunConfig apply(RunConfig cfg, const std::map<std::string, std::string>& kv, const std::string& origin) {
    for (const auto& [key, value] : kv) {
        const Key* found = nullptr;
        for (const auto& k : keys())
            if (k.name == key) found = &k;
        if (!found) throw ContractError(origin + ": unknown key '" + key + "'");
        try {
            found->set(cfg, value);
        } catch (const ContractError& e) {
            throw ContractError(origin + ": " + key + ": " + e.what());
        }
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return apply(std::move(base), parse_key_values(ss.str(), path.string()), path.string());
}

} // namespace hflow::cli
