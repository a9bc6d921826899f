#include "doctest.h"

#include "hflow/flow/flow_model.hpp"
#include "hflow/flow/train.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/gradcheck.hpp"
#include "hflow/numerics/random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>

using namespace hflow;
using namespace hflow::flow;
using num::Shape;

namespace {

Tensor random_tensor(Shape shape, num::Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = rng.uniform(lo, hi);
    return t;
}

Tensor random_levels(Shape shape, num::Rng& rng, int lo = 0, int hi = 255) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = static_cast<double>(rng.uniform_int(lo, hi));
    return t;
}

// Perturb every parameter so that no subnet is the zero-initialised identity.
void randomize(const num::ParamRefs& params, num::Rng& rng, double scale) {
    for (num::Parameter* p : params)
        for (double& v : p->value.storage()) v += rng.normal(0.0, scale);
}

const std::vector<std::size_t> kSmall{4, 6};

// log|det J| of `f` at `z` from a central-difference Jacobian.
double numeric_logdet(const std::function<Tensor(const Tensor&)>& f, const Tensor& z, double h = 1e-6) {
    const auto d = static_cast<Eigen::Index>(z.size());
    Eigen::MatrixXd J(d, d);
    for (Eigen::Index k = 0; k < d; ++k) {
        Tensor zp = z, zm = z;
        zp[static_cast<std::size_t>(k)] += h;
        zm[static_cast<std::size_t>(k)] -= h;
        const Tensor yp = f(zp), ym = f(zm);
        for (Eigen::Index r = 0; r < d; ++r)
            J(r, k) = (yp[static_cast<std::size_t>(r)] - ym[static_cast<std::size_t>(r)]) / (2 * h);
    }
    return std::log(std::abs(J.partialPivLu().determinant()));
}

} // namespace

TEST_CASE("squeeze: layout, permutation and exact inverse") {
    Tensor grid({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor s = squeeze(grid);
    CHECK(s.shape() == Shape{1, 4, 1, 1});
    CHECK(s.storage() == std::vector<double>{1, 2, 3, 4});

    num::Rng rng(1);
    Tensor x = random_tensor({2, 1, 4, 4}, rng);
    Tensor y = squeeze(x);
    CHECK(y.shape() == Shape{2, 4, 2, 2});
    auto a = x.storage(), b = y.storage();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    CHECK(unsqueeze(y) == x);
    CHECK_THROWS_AS(squeeze(Tensor::nchw(1, 1, 3, 4)), ContractError);
}

TEST_CASE("coupling: partition is exact and disjoint") {
    num::Rng rng(2);
    for (MaskPhase ph : {MaskPhase::AFirst, MaskPhase::BFirst}) {
        CouplingLayer cb("cb", MaskKind::Checkerboard, ph, 1, 0, kSmall, rng);
        CouplingLayer cb_other("cb2", MaskKind::Checkerboard,
                               ph == MaskPhase::AFirst ? MaskPhase::BFirst : MaskPhase::AFirst, 1, 0, kSmall, rng);
        std::size_t count = 0;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                count += cb.transformed(0, i, j);
                CHECK(cb.transformed(0, i, j) != cb_other.transformed(0, i, j));
            }
        CHECK(count == 8);
    }
    CouplingLayer ch("ch", MaskKind::Channel, MaskPhase::AFirst, 4, 0, kSmall, rng);
    CHECK(!ch.transformed(0, 0, 0));
    CHECK(!ch.transformed(1, 0, 0));
    CHECK(ch.transformed(2, 0, 0));
    CHECK(ch.transformed(3, 0, 0));
    CouplingLayer ch_b("chb", MaskKind::Channel, MaskPhase::BFirst, 4, 0, kSmall, rng);
    CHECK(ch_b.transformed(0, 0, 0));
    CHECK(!ch_b.transformed(3, 0, 0));
}

TEST_CASE("coupling: zero subnet is the identity") {
    num::Rng rng(3);
    CouplingLayer layer("c", MaskKind::Checkerboard, MaskPhase::AFirst, 1, 0, kSmall, rng);
    Tensor z = random_tensor({2, 1, 4, 4}, rng);
    std::vector<double> ld;
    Tensor y = layer.forward(z, ld);
    CHECK(y == z);
    CHECK(ld == std::vector<double>{0.0, 0.0});
    CHECK(layer.inverse(z) == z);
}

TEST_CASE("coupling: constant log-scale 0.3 over 8 transformed elements") {
    num::Rng rng(4);
    CouplingLayer layer("c", MaskKind::Checkerboard, MaskPhase::AFirst, 1, 0, kSmall, rng);
    layer.head_bias().value[0] = std::atanh(0.3); // raw s; factor starts at 1
    layer.head_bias().value[1] = 0.7;             // t
    Tensor z = random_tensor({1, 1, 4, 4}, rng);
    std::vector<double> ld;
    Tensor y = layer.forward(z, ld);
    CHECK(ld[0] == doctest::Approx(2.4).epsilon(1e-12));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            if (layer.transformed(0, i, j))
                CHECK(y.at(0, 0, i, j) == doctest::Approx(z.at(0, 0, i, j) * std::exp(0.3) + 0.7).epsilon(1e-12));
            else
                CHECK(y.at(0, 0, i, j) == z.at(0, 0, i, j));
        }
}

TEST_CASE("coupling: analytic log-det matches the numerical Jacobian") {
    num::Rng rng(5);
    struct Case {
        MaskKind kind;
        MaskPhase phase;
        Shape shape;
    };
    for (const Case& c : {Case{MaskKind::Checkerboard, MaskPhase::AFirst, {1, 1, 4, 4}},
                          Case{MaskKind::Checkerboard, MaskPhase::BFirst, {1, 1, 4, 4}},
                          Case{MaskKind::Channel, MaskPhase::AFirst, {1, 4, 2, 2}},
                          Case{MaskKind::Channel, MaskPhase::BFirst, {1, 4, 2, 2}}}) {
        CouplingLayer layer("c", c.kind, c.phase, c.shape[1], 0, kSmall, rng);
        num::ParamRefs ps;
        layer.collect(ps);
        randomize(ps, rng, 0.3);
        Tensor z = random_tensor(c.shape, rng);
        std::vector<double> ld;
        layer.forward(z, ld);
        const double numeric = numeric_logdet(
            [&](const Tensor& t) {
                std::vector<double> tmp;
                return layer.forward(t, tmp);
            },
            z);
        CHECK(std::abs(ld[0]) > 1e-3); // non-trivial case
        CHECK(std::abs(ld[0] - numeric) < 1e-6);
    }
}

TEST_CASE("coupling: inverse(forward(z)) = z") {
    num::Rng rng(6);
    for (MaskKind kind : {MaskKind::Checkerboard, MaskKind::Channel}) {
        CouplingLayer layer("c", kind, MaskPhase::BFirst, 4, 0, kSmall, rng);
        num::ParamRefs ps;
        layer.collect(ps);
        randomize(ps, rng, 0.3);
        Tensor z = random_tensor({3, 4, 4, 4}, rng, -3, 3);
        std::vector<double> ld;
        CHECK(num::max_abs_diff(layer.inverse(layer.forward(z, ld)), z) < 1e-9);
    }
}

TEST_CASE("coupling: conditional layer round trip and input check") {
    num::Rng rng(7);
    CouplingLayer layer("q", MaskKind::Checkerboard, MaskPhase::AFirst, 1, 1, kSmall, rng);
    num::ParamRefs ps;
    layer.collect(ps);
    randomize(ps, rng, 0.3);
    Tensor z = random_tensor({2, 1, 4, 4}, rng);
    Tensor cond = random_tensor({2, 1, 4, 4}, rng);
    std::vector<double> ld;
    CHECK(num::max_abs_diff(layer.inverse(layer.forward(z, ld, nullptr, &cond), &cond), z) < 1e-9);
    CHECK_THROWS_AS(layer.forward(z, ld), ContractError);
}

TEST_CASE("coupling: non-finite subnet output names the layer") {
    FlowConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    model.coupling(1).head_bias().value[0] = std::numeric_limits<double>::quiet_NaN();
    num::Rng rng(8);
    try {
        model.log_density(random_tensor({1, 1, 8, 8}, rng));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("flow.1") != std::string::npos);
    }
}

TEST_CASE("flow: standard architecture alternates phases and counts couplings") {
    for (std::size_t depth : {6u, 12u, 18u}) {
        const auto steps = standard_steps(depth);
        std::size_t couplings = 0, squeezes = 0;
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (steps[i].squeeze) {
                ++squeezes;
                continue;
            }
            ++couplings;
            if (i > 0 && !steps[i - 1].squeeze) {
                CHECK(steps[i].mask == steps[i - 1].mask);
                CHECK(steps[i].phase != steps[i - 1].phase);
            }
        }
        CHECK(couplings == depth);
        CHECK(squeezes == 2);
        CHECK(steps.front().mask == MaskKind::Checkerboard);
        CHECK(steps.back().mask == MaskKind::Channel);
    }
    CHECK_THROWS_AS(standard_steps(7), ContractError);
}

TEST_CASE("flow: zero layers, four zeros -> 4 * (-0.5 ln 2 pi)") {
    FlowConfig cfg;
    cfg.height = cfg.width = 2;
    cfg.depth = 0;
    FlowModel model(cfg);
    const auto lp = model.log_density(Tensor::nchw(1, 1, 2, 2));
    CHECK(lp[0] == doctest::Approx(-3.6757541328186907).epsilon(1e-14));
}

TEST_CASE("flow: 12-layer round trip and log-det additivity") {
    FlowConfig cfg;
    cfg.height = cfg.width = 16;
    cfg.subnet_widths = kSmall;
    cfg.init_seed = 9;
    FlowModel model(cfg);
    num::Rng rng(10);
    randomize(model.params(), rng, 0.05);
    Tensor v = random_tensor({4, 1, 16, 16}, rng, -2, 2);
    std::vector<double> total;
    Tensor z = model.encode(v, &total);
    CHECK(num::max_abs_diff(model.decode(z), v) < 1e-7);

    // Sum of per-layer log-dets, layer by layer.
    std::vector<double> by_layer(4, 0.0);
    Tensor t = v;
    std::size_t k = 0;
    for (const StepSpec& s : model.steps()) {
        if (s.squeeze) {
            t = squeeze(t);
            continue;
        }
        std::vector<double> ld;
        t = model.coupling(k++).forward(t, ld);
        for (std::size_t b = 0; b < 4; ++b) by_layer[b] += ld[b];
    }
    for (std::size_t b = 0; b < 4; ++b) CHECK(by_layer[b] == total[b]);
    CHECK(std::abs(total[0]) > 1e-3);
}

TEST_CASE("flow: 1-element model sums to one over 256 levels") {
    FlowConfig cfg;
    cfg.height = cfg.width = 1;
    cfg.depth = 0;
    cfg.steps = {StepSpec{false, MaskKind::Channel, MaskPhase::AFirst}};
    cfg.subnet_widths = {2};
    for (auto [raw_s, t] : {std::pair{0.4, 0.3}, std::pair{-0.2, -0.5}, std::pair{0.0, 0.0}}) {
        FlowModel model(cfg);
        model.coupling(0).head_bias().value[0] = raw_s;
        model.coupling(0).head_bias().value[1] = t;
        constexpr int kDense = 256;
        double total = 0.0;
        for (int level = 0; level < 256; ++level) {
            Tensor c = Tensor::nchw(kDense, 1, 1, 1);
            for (int m = 0; m < kDense; ++m) c[static_cast<std::size_t>(m)] = level + (m + 0.5) / kDense;
            for (double lp : model.log_prob_continuous(c)) total += std::exp(lp) / kDense;
        }
        CHECK(total == doctest::Approx(1.0).epsilon(0.02));
        CHECK(total <= 1.0 + 1e-6);
    }
}

TEST_CASE("flow: continuous log-prob gradient wrt input matches finite differences") {
    FlowConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(11);
    randomize(model.params(), rng, 0.1);
    Tensor c = random_tensor({2, 1, 8, 8}, rng, 1.0, 255.0);
    const std::vector<double> w{0.7, -1.3};
    FlowModel::ContinuousCache cache;
    model.log_prob_continuous(c, &cache);
    const Tensor g = model.log_prob_continuous_backward(cache, w, false);
    const auto objective = [&](const Tensor& t) {
        const auto lp = model.log_prob_continuous(t);
        return w[0] * lp[0] + w[1] * lp[1];
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < c.size(); i += 5) {
        Tensor cp = c, cm = c;
        cp[i] += 1e-4;
        cm[i] -= 1e-4;
        const double num_g = (objective(cp) - objective(cm)) / 2e-4;
        worst = std::max(worst, std::abs(num_g - g[i]) / std::max({std::abs(num_g), std::abs(g[i]), 1e-6}));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("gradients: single coupling layer NLL on 1x1x4x4") {
    FlowConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.depth = 0;
    cfg.steps = {StepSpec{false, MaskKind::Checkerboard, MaskPhase::AFirst}};
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(12);
    const auto params = model.params();
    randomize(params, rng, 0.2);
    const Tensor x = random_levels({1, 1, 4, 4}, rng);
    const auto loss = [&](bool backward) {
        FlowModel::DiscreteCache cache;
        const auto lp = model.log_prob(x, 3, backward ? &cache : nullptr);
        if (backward) model.log_prob_backward(cache, std::vector<double>{-1.0});
        return -lp[0];
    };
    const auto report = num::grad_check(loss, params, 1e-3);
    CHECK(report.passed);
    CHECK(report.max_relative_error < 1e-3);
}

TEST_CASE("gradients: full 12-layer flow NLL on 1x1x16x16") {
    FlowConfig cfg;
    cfg.height = cfg.width = 16;
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(13);
    const auto params = model.params();
    randomize(params, rng, 0.05);
    const Tensor x = random_levels({1, 1, 16, 16}, rng);
    const auto loss = [&](bool backward) {
        FlowModel::DiscreteCache cache;
        const auto lp = model.log_prob(x, 4, backward ? &cache : nullptr);
        if (backward) model.log_prob_backward(cache, std::vector<double>{-1.0});
        return -lp[0];
    };
    num::GradCheckOptions opts;
    opts.samples = 96;
    const auto report = num::grad_check(loss, params, 1e-3, opts);
    CHECK(report.passed);
    CHECK(report.max_relative_error < 1e-3);
}

TEST_CASE("gradients: variational dequantisation parameters") {
    FlowConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    cfg.dequant = DequantMode::Variational;
    cfg.dequant_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(14);
    const auto params = model.params();
    randomize(params, rng, 0.1);
    const Tensor x = random_levels({2, 1, 8, 8}, rng);
    const auto loss = [&](bool backward) {
        FlowModel::DiscreteCache cache;
        const auto lp = model.log_prob(x, 5, backward ? &cache : nullptr);
        if (backward) model.log_prob_backward(cache, std::vector<double>{-1.0, -1.0});
        return -(lp[0] + lp[1]);
    };
    num::GradCheckOptions opts;
    opts.samples = 96;
    const auto report = num::grad_check(loss, params, 1e-3, opts);
    CHECK(report.passed);
}

TEST_CASE("log_prob: discrete input contract and determinism") {
    FlowConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(15);
    Tensor x = random_levels({3, 1, 4, 4}, rng);
    CHECK(model.log_prob(x, 1) == model.log_prob(x, 1));
    CHECK(model.log_prob(x, 1) != model.log_prob(x, 2));
    // Chunked evaluation draws the same per-item noise.
    const auto whole = model.log_prob(x, 9);
    CHECK(log_prob_chunked(model, x, 9, 2) == whole);
    Tensor bad = x;
    bad[0] = 256;
    CHECK_THROWS_AS(model.log_prob(bad, 1), ContractError);
    bad[0] = 3.5;
    CHECK_THROWS_AS(model.log_prob(bad, 1), ContractError);
}

TEST_CASE("bpd: -log p = D ln 2 gives exactly 1") {
    CHECK(bits_per_dim(-256 * std::numbers::ln2, 256) == 1.0);
    CHECK(bits_per_dim(0.0, 10) == 0.0);
}

TEST_CASE("guided loss: empty augmented set reduces to the plain NLL sum") {
    FlowConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(16);
    Tensor src = random_levels({3, 1, 4, 4}, rng);
    GuidanceConfig g;
    const GuidedLoss gl = guided_loss(model, src, Tensor(), Tensor(), g, 7, false);
    const auto bpd = bits_per_dim(model.log_prob(src, 7), model.dims());
    CHECK(gl.loss == doctest::Approx(bpd[0] + bpd[1] + bpd[2]).epsilon(1e-14));
    CHECK(g.margin == 1.2);
}

TEST_CASE("guided loss: clipped augmented samples contribute -N'c and zero gradient") {
    FlowConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(17);
    const auto params = model.params();
    randomize(params, rng, 0.1);
    Tensor origin = random_levels({3, 1, 4, 4}, rng, 100, 150);
    Tensor aug = origin;
    for (double& v : aug.storage()) v -= 90; // MSE 8100
    GuidanceConfig g;
    g.margin = 1.2;
    const GuidedLoss probe = guided_loss(model, Tensor(), aug, origin, g, 3, false);
    for (double b : probe.augmented_bpd) REQUIRE(b >= g.margin); // untrained flow: every sample clipped
    CHECK(probe.loss == -3 * 1.2);
    CHECK(probe.clipped == 3);

    num::zero_grads(params);
    guided_loss(model, Tensor(), aug, origin, g, 3, true);
    for (const num::Parameter* p : params) CHECK(num::max_abs(p->grad) == 0.0);
    // Finite differences of the guiding term are zero as well.
    for (std::size_t k = 0; k < 20; ++k) {
        num::Parameter* p = params[k * 7 % params.size()];
        const std::size_t i = k % p->value.size();
        const double keep = p->value[i];
        p->value[i] = keep + 1e-5;
        const double up = guided_loss(model, Tensor(), aug, origin, g, 3, false).loss;
        p->value[i] = keep - 1e-5;
        const double down = guided_loss(model, Tensor(), aug, origin, g, 3, false).loss;
        p->value[i] = keep;
        CHECK((up - down) / 2e-5 == 0.0);
    }
}

TEST_CASE("guided loss: unclipped branch gradient matches finite differences") {
    FlowConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(18);
    const auto params = model.params();
    randomize(params, rng, 0.1);
    Tensor src = random_levels({2, 1, 4, 4}, rng);
    Tensor origin = random_levels({2, 1, 4, 4}, rng, 100, 150);
    Tensor aug = origin;
    for (double& v : aug.storage()) v += 60;
    GuidanceConfig g;
    g.margin = 100.0; // nothing clipped
    const auto loss = [&](bool backward) { return guided_loss(model, src, aug, origin, g, 5, backward).loss; };
    const auto report = num::grad_check(loss, params, 1e-3);
    CHECK(report.passed);
}

TEST_CASE("guided loss: threshold violation is rejected") {
    FlowConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    FlowModel model(cfg);
    Tensor origin = Tensor::nchw(1, 1, 4, 4, 100);
    Tensor aug = Tensor::nchw(1, 1, 4, 4, 105); // MSE 25
    CHECK_THROWS_AS(guided_loss(model, Tensor(), aug, origin, GuidanceConfig{}, 1, false), ContractError);
}

TEST_CASE("sample: identity flow maps clamped normals onto the grid, deterministically") {
    FlowConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.depth = 0;
    FlowModel model(cfg);
    const Tensor s = model.sample(3, 21);
    CHECK(s == model.sample(3, 21));
    const double a = cfg.logit_alpha;
    for (std::size_t b = 0; b < 3; ++b) {
        num::Rng rng(num::derive_seed(21, b));
        for (std::size_t i = 0; i < 16; ++i) {
            const double z = rng.normal();
            const double c = 256.0 * (1.0 / (1.0 + std::exp(-z)) - a) / (1.0 - 2.0 * a);
            CHECK(s[b * 16 + i] == std::floor(std::clamp(c, 0.0, 255.0)));
        }
    }
}

TEST_CASE("checkpoint: round trip preserves densities and bytes") {
    FlowConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.depth = 6;
    cfg.subnet_widths = kSmall;
    cfg.dequant = DequantMode::Variational;
    cfg.dequant_widths = kSmall;
    FlowModel model(cfg);
    num::Rng rng(19);
    randomize(model.params(), rng, 0.1);
    model.reference_bpd = 1.25;
    const auto bytes = num::encode_archive(model.to_archive());
    FlowModel back = FlowModel::from_archive(num::decode_archive(bytes));
    CHECK(num::encode_archive(back.to_archive()) == bytes);
    CHECK(back.reference_bpd == 1.25);
    Tensor x = random_levels({2, 1, 8, 8}, rng);
    CHECK(back.log_prob(x, 4) == model.log_prob(x, 4));
}

TEST_CASE("train_flow: zero iterations leave the model unchanged; training lowers BPD") {
    FlowConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.depth = 3;
    cfg.subnet_widths = kSmall;
    num::Rng rng(20);
    Tensor data = Tensor::nchw(24, 1, 8, 8);
    for (std::size_t b = 0; b < 24; ++b)
        for (std::size_t i = 0; i < 64; ++i)
            data[b * 64 + i] = std::clamp(std::round(((i / 8 + i % 8) % 2 ? 60.0 : 180.0) + rng.normal(0, 3)), 0.0, 255.0);
    Tensor train = num::slice_batch(data, 0, 16), val = num::slice_batch(data, 16, 24);

    FlowModel model(cfg);
    const auto before = num::encode_archive(model.to_archive());
    FlowTrainConfig tc;
    tc.iterations = 0;
    tc.guidance.enabled = false;
    train_flow(model, train, val, tc);
    model.reference_bpd = std::numeric_limits<double>::quiet_NaN();
    CHECK(num::encode_archive(model.to_archive()) == before);

    tc.iterations = 150;
    tc.batch = 8;
    tc.adam.learning_rate = 5e-3;
    const FlowTrainResult r = train_flow(model, train, val, tc);
    CHECK(!r.diverged);
    CHECK(r.final_val_bpd < r.initial_val_bpd - 1.0);
    CHECK(model.reference_bpd == r.final_val_bpd);
}
