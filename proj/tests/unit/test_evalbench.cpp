#include "doctest.h"

#include "hflow/evalbench/dataset_io.hpp"
#include "hflow/evalbench/metrics.hpp"
#include "hflow/evalbench/phantom.hpp"
#include "hflow/evalbench/segmenter.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/gradcheck.hpp"
#include "hflow/numerics/random.hpp"
#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

using namespace hflow;
using namespace hflow::eval;
using namespace hflow::testing;

namespace {

Tensor label_image(std::size_t h, std::size_t w, std::initializer_list<std::pair<std::size_t, std::size_t>> on) {
    Tensor t = Tensor::nchw(1, 1, h, w);
    for (auto [i, j] : on) t[i * w + j] = 1.0;
    return t;
}

PhantomSpec small_spec() {
    PhantomSpec s;
    s.size = 32;
    return s;
}

} // namespace

TEST_CASE("dice: examples and oracle agreement on 200 random instances") {
    const Tensor a = label_image(6, 6, {{1, 1}, {1, 2}, {1, 3}, {2, 1}, {2, 2}, {2, 3}, {3, 1}, {3, 2}, {3, 3}});
    const Tensor b = label_image(6, 6, {{1, 2}, {1, 3}, {1, 4}, {2, 2}, {2, 3}, {2, 4}, {3, 2}, {3, 3}, {3, 4}});
    CHECK(dice(a, b, 2).per_class[1] == doctest::Approx(2.0 * 6 / 18).epsilon(1e-15));
    CHECK(dice(a, a, 2).per_class == std::vector<double>{1.0, 1.0});
    const Tensor c = label_image(6, 6, {{5, 5}});
    const Tensor d = label_image(6, 6, {{0, 0}});
    CHECK(dice(c, d, 2).per_class[1] == 0.0);
    CHECK(dice(c, d, 3).per_class[2] == 1.0); // absent in both
    CHECK_THROWS_AS(dice(a, Tensor::nchw(1, 1, 6, 6, 2.0), 2), ContractError);

    num::Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t k = static_cast<std::size_t>(rng.uniform_int(2, 5));
        const Tensor p = random_labels(12, 12, k, rng), t = random_labels(12, 12, k, rng);
        const DiceResult r = dice(p, t, k);
        double mean = 0.0;
        for (std::size_t c2 = 0; c2 < k; ++c2) {
            REQUIRE(r.per_class[c2] == dice_oracle(p, t, static_cast<double>(c2)));
            if (c2 > 0) mean += r.per_class[c2];
        }
        CHECK(r.mean == doctest::Approx(mean / static_cast<double>(k - 1)).epsilon(1e-15));
        CHECK(dice(t, p, k).per_class == r.per_class);
    }
}

TEST_CASE("hd95: examples and exact oracle agreement on 200 random masks") {
    const Tensor a = label_image(12, 12, {{2, 2}});
    const Tensor b = label_image(12, 12, {{2, 7}});
    CHECK(hd95(a, b, 1) == 5.0);
    CHECK(hd95(a, a, 1) == 0.0);
    CHECK_THROWS_AS(hd95(a, Tensor::nchw(1, 1, 12, 12), 1), ContractError);

    num::Rng rng(2);
    int tested = 0;
    while (tested < 200) {
        const auto h = static_cast<std::size_t>(rng.uniform_int(3, 16));
        const auto w = static_cast<std::size_t>(rng.uniform_int(3, 16));
        const Tensor p = random_labels(h, w, 3, rng), t = random_labels(h, w, 3, rng);
        for (std::size_t c = 1; c < 3; ++c) {
            if (std::find(p.values().begin(), p.values().end(), double(c)) == p.values().end() ||
                std::find(t.values().begin(), t.values().end(), double(c)) == t.values().end())
                continue;
            REQUIRE(hd95(p, t, c) == hd95_oracle(p, t, static_cast<double>(c)));
            ++tested;
        }
    }
}

TEST_CASE("wasserstein_hist: examples, metric properties, OT oracle on 16-bin histograms") {
    std::vector<double> d0(256, 0.0), d10(256, 0.0);
    d0[0] = 1.0;
    d10[10] = 1.0;
    CHECK(wasserstein_hist(d0, d10) == 10.0);
    CHECK(wasserstein_hist(d0, d0) == 0.0);
    std::vector<double> bad = d0;
    bad[1] = 0.5;
    CHECK_THROWS_AS(wasserstein_hist(bad, d0), ContractError);

    num::Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const auto h1 = random_hist(16, rng), h2 = random_hist(16, rng), h3 = random_hist(16, rng);
        const double w12 = wasserstein_hist(h1, h2);
        REQUIRE(std::abs(w12 - transport_oracle(h1, h2)) < 1e-9);
        CHECK(std::abs(w12 - wasserstein_hist(h2, h1)) < 1e-12);
        CHECK(w12 > 1e-9);
        CHECK(wasserstein_hist(h1, h1) < 1e-12);
        CHECK(wasserstein_hist(h1, h3) <= w12 + wasserstein_hist(h2, h3) + 1e-12);
    }
}

TEST_CASE("hist_match: own histogram is the identity, constant maps to the median, LUT monotone") {
    num::Rng rng(4);
    Tensor img = Tensor::nchw(1, 1, 16, 16);
    for (double& v : img.storage()) v = std::round(std::clamp(rng.normal(100, 30), 0.0, 255.0));
    const auto own = histogram256(img);
    CHECK(hist_match(img, own) == img);

    std::vector<double> ref(256, 0.0);
    ref[10] = 0.2;
    ref[50] = 0.2;
    ref[80] = 0.2; // median
    ref[200] = 0.4;
    const Tensor constant = Tensor::nchw(1, 1, 8, 8, 130.0);
    const Tensor matched = hist_match(constant, ref);
    for (double v : matched.values()) CHECK(v == 80.0);

    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::nchw(1, 1, 16, 16);
        for (double& v : x.storage()) v = static_cast<double>(rng.uniform_int(0, 255));
        std::vector<double> r(256);
        for (double& v : r) v = rng.uniform();
        const double s = std::accumulate(r.begin(), r.end(), 0.0);
        for (double& v : r) v /= s;
        CHECK(aug::is_monotone(hist_match_lut(x, r)));
    }
}

TEST_CASE("hist_match: matched phantom images move closer to the source histogram") {
    const PhantomSpec spec = small_spec();
    const auto sites = default_sites();
    const PhantomDataset ds = generate(spec, sites, 8, 11);
    const auto ref = histogram256(ds.sites[0].images);
    for (std::size_t s = 1; s < 3; ++s) {
        const Tensor& x = ds.sites[s].images;
        const double before = wasserstein_hist(histogram256(x), ref);
        const double after = wasserstein_hist(histogram256(hist_match(x, ref)), ref);
        CHECK(after < before);
    }
}

TEST_CASE("friedman_rank: trivial cases and a hand-enumerated tie") {
    CHECK(friedman_rank({{0.3, 0.2}}, {true, false}) == std::vector<double>{1.0});
    CHECK(friedman_rank({{0.9, 1.0}, {0.8, 2.0}}, {true, false}) == std::vector<double>{1.0, 2.0});
    // Settings 0, 1 higher-better; 2, 3 lower-better. Setting 1 ties A and B
    // for first place (1.5 each).
    //        s0 s1  s2 s3
    //   A:   1  1.5 3  1   -> 6.5 / 4
    //   B:   2  1.5 1  2   -> 6.5 / 4
    //   C:   3  3   2  3   -> 11 / 4
    const auto r = friedman_rank({{0.9, 0.9, 3.0, 1.0}, {0.8, 0.9, 1.0, 2.0}, {0.7, 0.8, 2.0, 3.0}},
                                 {true, true, false, false});
    CHECK(r == std::vector<double>{1.625, 1.625, 2.75});
    CHECK_THROWS_AS(friedman_rank({{0.1, std::nan("")}, {0.2, 0.3}}, {true, true}), ContractError);
    CHECK_THROWS_AS(friedman_rank({{0.1}, {0.2, 0.3}}, {true, true}), ContractError);
}

TEST_CASE("entropy: uniform 15-class and one-hot closed forms") {
    Tensor u = Tensor::nchw(1, 15, 2, 2, 1.0 / 15.0);
    CHECK(mean_entropy(u)[0] == doctest::Approx(std::log(15.0)).epsilon(1e-12));
    CHECK(std::log(15.0) == doctest::Approx(2.708).epsilon(1e-3));
    Tensor one = Tensor::nchw(1, 3, 2, 2);
    for (std::size_t i = 0; i < 4; ++i) one.plane_ptr(0, i % 3)[i] = 1.0;
    CHECK(mean_entropy(one)[0] == 0.0);
}

TEST_CASE("phantom: labels cover every pixel, bands validated, masks independent of site") {
    PhantomSpec spec;
    for (std::size_t k = 2; k <= 5; ++k) {
        spec.classes = k;
        const Anatomy a = sample_anatomy(spec, 7);
        std::vector<std::size_t> count(k, 0);
        for (double v : a.labels.values()) {
            REQUIRE(v >= 0.0);
            REQUIRE(v < static_cast<double>(k));
            ++count[static_cast<std::size_t>(v)];
        }
        for (std::size_t c = 0; c < k; ++c) CHECK(count[c] > 0);
    }
    spec.classes = 3;
    spec.bands = {{0, 10}, {5, 50}, {100, 120}};
    CHECK_THROWS_AS(spec.validate(), ContractError);
    spec.size = 40;
    CHECK_THROWS_AS(spec.validate(), ContractError);

    const PhantomSpec s5;
    const Anatomy a = sample_anatomy(s5, 123);
    const auto sites = default_sites();
    const Tensor ia = render(s5, a, sites[0], 9), ib = render(s5, a, sites[1], 9);
    CHECK(ia != ib);
    // Masks are a property of the subject only.
    CHECK(sample_anatomy(s5, 123).labels == a.labels);
}

TEST_CASE("phantom: identity transform without noise reproduces the base rendering") {
    const PhantomSpec spec;
    const Anatomy a = sample_anatomy(spec, 5);
    SiteTransform id;
    id.name = "id";
    id.noise_sigma = 0.0;
    const Tensor out = render(spec, a, id, 3);
    Tensor base = base_image(spec, a, 3);
    for (double& v : base.storage()) v = std::clamp(std::round(v), 0.0, 255.0);
    CHECK(out == base);
}

TEST_CASE("phantom: per-class means under a gamma-0.5 site follow the LUT within 2 levels") {
    const PhantomSpec spec;
    SiteTransform g;
    g.name = "gamma";
    g.map = {};
    for (int i = 0; i <= 255; ++i) {
        g.map.inputs.push_back(i);
        g.map.outputs.push_back(255.0 * std::sqrt(i / 255.0));
    }
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Anatomy a = sample_anatomy(spec, seed);
        const Tensor img = render(spec, a, g, seed + 100);
        for (std::size_t c = 0; c < spec.classes; ++c) {
            double s = 0.0, n = 0.0;
            for (std::size_t i = 0; i < img.size(); ++i)
                if (a.labels[i] == static_cast<double>(c)) {
                    s += img[i];
                    n += 1.0;
                }
            const double expect = g.map(a.intensity[c]);
            CHECK(std::abs(s / n - expect) <= 2.0);
        }
    }
}

TEST_CASE("generate: splits, determinism, contract errors") {
    const PhantomSpec spec = small_spec();
    const auto sites = default_sites(2);
    const auto c = split_counts(64);
    CHECK(c.train == 38);
    CHECK(c.val == 10);
    CHECK(c.test == 16);

    const PhantomDataset a = generate(spec, sites, 12, 42);
    const PhantomDataset b = generate(spec, sites, 12, 42);
    const PhantomDataset other = generate(spec, sites, 12, 43);
    REQUIRE(a.sites.size() == 2);
    CHECK(a.sites[0].images == b.sites[0].images);
    CHECK(a.sites[1].masks == b.sites[1].masks);
    CHECK(a.sites[0].images != other.sites[0].images);
    const auto sc = split_counts(12);
    CHECK(a.sites[0].indices_of(Split::Train).size() == sc.train);
    CHECK(a.sites[0].indices_of(Split::Val).size() == sc.val);
    CHECK(a.sites[0].images_of(Split::Test).n() == sc.test);
    CHECK(&a.site("site-b") == &a.sites[1]);
    CHECK_THROWS_AS(a.site("nope"), ContractError);
    CHECK_THROWS_AS(generate(spec, sites, 7, 1), ContractError);
}

TEST_CASE("dataset io: PGM and directory round trips are byte-stable") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "hflow_test_dataset";
    fs::remove_all(dir);
    const PhantomDataset ds = generate(small_spec(), default_sites(), 8, 5);
    save_dataset(ds, dir);
    const auto manifest = num::read_file_bytes(dir / "manifest.txt");
    const auto first = num::read_file_bytes(dir / "site-b" / "images" / "0003.pgm");
    const PhantomDataset back = load_dataset(dir);
    REQUIRE(back.sites.size() == 3);
    for (std::size_t s = 0; s < 3; ++s) {
        CHECK(back.sites[s].images == ds.sites[s].images);
        CHECK(back.sites[s].masks == ds.sites[s].masks);
        CHECK(back.sites[s].split == ds.sites[s].split);
        CHECK(back.sites[s].transform.map.to_lut() == ds.sites[s].transform.map.to_lut());
    }
    save_dataset(back, dir);
    CHECK(num::read_file_bytes(dir / "manifest.txt") == manifest);
    CHECK(num::read_file_bytes(dir / "site-b" / "images" / "0003.pgm") == first);

    num::write_file_atomic(dir / "bad.pgm", {'P', '2', '\n'});
    CHECK_THROWS_AS(read_pgm(dir / "bad.pgm"), ContractError);
    CHECK_THROWS_AS(write_pgm(dir / "x.pgm", Tensor::nchw(1, 1, 2, 2, 0.5)), ContractError);
    fs::remove_all(dir);
}

TEST_CASE("segmenter: probabilities sum to 1, CE gradient, learns phantoms") {
    SegmenterConfig cfg;
    cfg.classes = 5;
    cfg.widths = {4, 6};
    Segmenter seg(cfg);
    num::Rng rng(8);
    const PhantomDataset ds = generate(small_spec(), default_sites(1), 16, 3);
    const Tensor x = ds.sites[0].images, m = ds.sites[0].masks;
    const Tensor p = seg.probabilities(num::slice_batch(x, 0, 2));
    CHECK(p.c() == 5);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < p.plane(); ++i) {
            double s = 0.0;
            for (std::size_t c = 0; c < 5; ++c) s += p.plane_ptr(b, c)[i];
            REQUIRE(std::abs(s - 1.0) < 1e-6);
        }

    Segmenter tiny(SegmenterConfig{3, {3, 4}, 1, 2});
    Tensor xs = Tensor::nchw(2, 1, 8, 8), ms = Tensor::nchw(2, 1, 8, 8);
    for (double& v : xs.storage()) v = static_cast<double>(rng.uniform_int(0, 255));
    for (double& v : ms.storage()) v = static_cast<double>(rng.uniform_int(0, 2));
    const auto report = num::grad_check([&](bool bw) { return tiny.cross_entropy(xs, ms, bw); }, tiny.params(), 1e-4);
    CHECK(report.passed);

    SegTrainConfig tc;
    tc.iterations = 150;
    tc.batch = 4;
    const SegTrainResult r = train_segmenter(seg, x, m, tc);
    CHECK(!r.diverged);
    CHECK(r.loss.back() < 0.5 * r.loss.front());
    const SegEvaluation ev = evaluate_segmentation(seg, x, m);
    CHECK(ev.dice > 0.5);
}
