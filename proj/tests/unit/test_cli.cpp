#include "doctest.h"

#include "hflow/cli/pipeline.hpp"
#include "hflow/numerics/archive.hpp"
#include "hflow/numerics/error.hpp"

#include <filesystem>
#include <functional>

using namespace hflow;
using namespace hflow::cli;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(const fs::path& out) {
    RunConfig c;
    c.seed = 3;
    c.image_size = 16;
    c.output_dir = out.string();
    c.sites = 2;
    c.n_per_site = 8;
    c.flow_depth = 3;
    c.flow_widths = {4, 4};
    c.flow_iters = 4;
    c.flow_batch = 2;
    c.flow_margin = 5.0;
    c.harm_widths = {4, 4};
    c.harm_iters = 4;
    c.harm_batch = 2;
    c.seg_widths = {4, 4};
    c.seg_iters = 4;
    c.seg_batch = 2;
    c.adapt_lr = 1e-3;
    c.adapt_batch = 2;
    c.adapt_max_epochs = 2;
    return c;
}

const auto quiet = [](const std::string&) {};

// True when f throws a ContractError whose message contains `needle`.
bool throws_naming(const std::function<void()>& f, const std::string& needle) {
    try {
        f();
    } catch (const ContractError& e) {
        return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("hflow-cli-" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("config: resolved text round-trips and lists every key") {
    RunConfig c;
    c.flow_margin = 0.1 + 0.2;
    c.adapt_stopping = "fixed-steps,4";
    const std::string text = to_text(c);
    const RunConfig back = apply(RunConfig{}, parse_key_values(text, "t"), "t");
    CHECK(to_text(back) == text);
    CHECK(config_hash(back) == config_hash(c));
    for (const auto& k : config_keys()) CHECK(text.find(k + " = ") != std::string::npos);
    CHECK(back.adapt_config().fixed_epochs == 4);
}

TEST_CASE("config: unknown keys, duplicates and bad values are rejected") {
    CHECK_THROWS_WITH_AS(apply(RunConfig{}, {{"flow.margin", "1"}}, "f.conf"), "f.conf: unknown key 'flow.margin'",
                         ContractError);
    CHECK_THROWS_AS(parse_key_values("seed = 1\nseed = 2\n", "f"), ContractError);
    CHECK_THROWS_AS(parse_key_values("seed 1\n", "f"), ContractError);
    CHECK_THROWS_AS(apply(RunConfig{}, {{"flow.iters", "-3"}}, "f"), ContractError);
    CHECK_THROWS_AS(apply(RunConfig{}, {{"flow.guidance", "maybe"}}, "f"), ContractError);
    RunConfig c;
    c.adapt_stopping = "fixed-steps";
    CHECK_THROWS_AS(c.validate(), ContractError);
    c.adapt_stopping = "entropy,3";
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = RunConfig{};
    c.image_size = 40;
    CHECK_THROWS_AS(c.validate(), ContractError);
    CHECK(parse_key_values("# comment\n seed = 5 # trailing\n\n", "f").at("seed") == "5");
}

TEST_CASE("run directory: lock is exclusive; a different config is refused") {
    const fs::path dir = scratch("lock");
    const RunConfig c = tiny(dir);
    const Paths paths{dir};
    prepare_output(c, paths);
    {
        RunLock lock(paths);
        CHECK_THROWS_AS(RunLock{paths}, ContractError);
    }
    RunLock again(paths);
    RunConfig other = c;
    other.seed = 4;
    CHECK_THROWS_AS(prepare_output(other, paths), ContractError);
    fs::remove_all(dir);
}

TEST_CASE("pipeline: stages chain through artifacts; missing inputs name their path") {
    const fs::path dir = scratch("chain");
    RunConfig c = tiny(dir);
    c.adapt_stopping = "fixed-steps,0";
    const Paths paths{dir};
    prepare_output(c, paths);
    CHECK(throws_naming([&] { train_flows(c, paths, {}, quiet); }, (dir / "data").string()));
    record_stage(c, paths, gen_data(c, paths, quiet));
    CHECK(throws_naming([&] { adapt_pairs(c, paths, {}, quiet); }, paths.flow("site-a").string()));
    train_flows(c, paths, {}, quiet);
    train_harmonizers(c, paths, {}, quiet);
    train_segmenters(c, paths, {}, quiet);

    // Baseline rows need no harmonizer artifacts.
    const EvalTable base = evaluate(c, paths, true, {}, nullptr, quiet);
    CHECK(base.methods == std::vector<std::string>{"baseline", "hist-match"});
    CHECK(throws_naming([&] { evaluate(c, paths, false, {}, nullptr, quiet); },
                        paths.adapted("site-a", "site-b").string()));

    // fixed-steps,0 writes the pretrained harmonizer unchanged.
    adapt_pairs(c, paths, {}, quiet);
    CHECK(num::read_file_bytes(paths.adapted("site-a", "site-b")) == num::read_file_bytes(paths.harmonizer("site-a")));

    const EvalTable t = evaluate(c, paths, false, {}, nullptr, quiet);
    for (const auto& row : t.rows) {
        if (row.method != "pretrained") continue;
        for (const auto& other : t.rows)
            if (other.method == "harmonizing-flows" && other.source == row.source && other.target == row.target)
                CHECK(other.dice == row.dice);
    }
    // Oracle rows: the source site as its own target.
    std::size_t oracle = 0;
    for (const auto& row : t.rows) oracle += row.method == "oracle" && row.source == row.target;
    CHECK(oracle == 2);
    CHECK(t.friedman.size() == 4);
    CHECK(fs::exists(paths.evaluation()));
    CHECK(fs::exists(paths.manifest()));
    fs::remove_all(dir);
}

TEST_CASE("pipeline: gen-data is byte-identical on rerun and changes with the seed") {
    const fs::path a = scratch("gen-a"), b = scratch("gen-b");
    RunConfig ca = tiny(a), cb = tiny(b);
    gen_data(ca, Paths{a}, quiet);
    gen_data(cb, Paths{b}, quiet);
    const auto img = fs::path("data") / "site-a" / "images" / "0000.pgm";
    CHECK(num::read_file_bytes(a / img) == num::read_file_bytes(b / img));
    cb.seed = 99;
    gen_data(cb, Paths{b}, quiet);
    CHECK(num::read_file_bytes(a / img) != num::read_file_bytes(b / img));
    fs::remove_all(a);
    fs::remove_all(b);
}
