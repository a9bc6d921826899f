#include "doctest.h"

#include "hflow/augment/augment.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/random.hpp"

using namespace hflow;
using namespace hflow::aug;
using num::Tensor;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    num::Rng rng(seed);
    Tensor t = Tensor::nchw(1, 1, h, w);
    for (double& v : t.storage()) v = static_cast<double>(rng.uniform_int(0, 255));
    return t;
}

} // namespace

TEST_CASE("augment: neutral parameters give the identity") {
    std::vector<Op> ops{{Kind::Gamma, 1.0, {}}, {Kind::Brightness, 0.0, {}}, {Kind::Scale, 1.0, {}}};
    CHECK(lut_of(ops) == identity_lut());
}

TEST_CASE("augment: brightness shift on a constant image") {
    Tensor img = Tensor::nchw(1, 1, 8, 8, 100.0);
    Lut lut = lut_of({{Kind::Brightness, 30.0, {}}});
    Tensor out = apply_lut(lut, img);
    for (double v : out.values()) CHECK(v == 130.0);
}

TEST_CASE("augment: every sampled transform is monotone and in range") {
    AugmentationSpec spec;
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        const Transform tr = sample_transform(spec, seed);
        REQUIRE(is_monotone(tr.lut));
        CHECK(tr.ops.size() >= 1);
        CHECK(tr.ops.size() <= 3);
    }
}

TEST_CASE("augment: composed transforms preserve pixel ordering (exhaustive pairs)") {
    AugmentationSpec spec;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tensor x = random_image(8, 8, seed);
        Tensor y = apply(spec, x, seed * 31 + 7);
        bool ordered = true;
        for (std::size_t p = 0; p < x.size(); ++p)
            for (std::size_t q = 0; q < x.size(); ++q)
                if (x[p] <= x[q] && !(y[p] <= y[q])) ordered = false;
        CHECK(ordered);
        for (double v : y.values()) CHECK((v >= 0.0 && v <= 255.0));
    }
}

TEST_CASE("augment: deterministic per seed") {
    AugmentationSpec spec;
    Tensor x = random_image(16, 16, 3);
    CHECK(apply(spec, x, 42) == apply(spec, x, 42));
    CHECK(apply_ood(spec, x, 42, 100.0) == apply_ood(spec, x, 42, 100.0));
}

TEST_CASE("augment: monotone map evaluation") {
    MonotoneMap m{{0.0, 100.0, 255.0}, {0.0, 50.0, 255.0}};
    CHECK(m(50.0) == doctest::Approx(25.0));
    CHECK(m(100.0) == doctest::Approx(50.0));
    CHECK(m(177.5) == doctest::Approx(152.5));
    CHECK(is_monotone(m.to_lut()));
}

TEST_CASE("apply_ood: threshold 0 accepts the first draw") {
    AugmentationSpec spec;
    Tensor x = random_image(8, 8, 5);
    const std::uint64_t item_seed = num::derive_seed(9, 0);
    CHECK(apply_ood(spec, x, 9, 0.0) == apply(spec, x, num::derive_seed(item_seed, 0)));
}

TEST_CASE("apply_ood: every output exceeds the threshold") {
    AugmentationSpec spec;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Tensor x = random_image(16, 16, seed + 100);
        Tensor y = apply_ood(spec, x, seed, 100.0);
        CHECK(mse(x, y) > 100.0);
    }
}

TEST_CASE("apply_ood: constant image with brightness-only shifts succeeds iff b^2 > threshold") {
    Tensor img = Tensor::nchw(1, 1, 8, 8, 100.0);
    AugmentationSpec spec;
    spec.kinds = {Kind::Brightness};
    spec.min_ops = spec.max_ops = 1;
    const double threshold = 100.0;

    spec.brightness = {-20.0, 20.0}; // b^2 = 400 > 100
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tensor y = apply_ood(spec, img, seed, threshold);
        CHECK(mse(img, y) > threshold);
    }

    spec.brightness = {-9.0, 9.0}; // b^2 = 81 <= 100: no shift can exceed the threshold
    for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK_THROWS_AS(apply_ood(spec, img, seed, threshold), ContractError);
}

TEST_CASE("augment: key-value round trip and validation") {
    AugmentationSpec spec;
    spec.kinds = {Kind::Monotone, Kind::Gamma};
    spec.gamma = {0.5, 2.0};
    spec.knot_jitter = 12.5;
    spec.seed = 77;
    std::map<std::string, std::string> kv;
    write_keys(spec, "x.", kv);
    AugmentationSpec back = read_keys(kv, "x.");
    CHECK(back.kinds == spec.kinds);
    CHECK(back.gamma.lo == 0.5);
    CHECK(back.gamma.hi == 2.0);
    CHECK(back.knot_jitter == 12.5);
    CHECK(back.seed == 77);
    kv["x.kinds"] = "sharpen";
    CHECK_THROWS_AS(read_keys(kv, "x."), ContractError);
    kv["x.kinds"] = "gamma";
    kv["x.ops"] = "3,1";
    CHECK_THROWS_AS(read_keys(kv, "x."), ContractError);
}
