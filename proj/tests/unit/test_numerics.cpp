#include "doctest.h"

#include "hflow/numerics/adam.hpp"
#include "hflow/numerics/archive.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/gradcheck.hpp"
#include "hflow/numerics/ops.hpp"
#include "hflow/numerics/random.hpp"
#include "hflow/numerics/unet.hpp"

#include <cmath>
#include <limits>

using namespace hflow;
using namespace hflow::num;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = rng.uniform(lo, hi);
    return t;
}

// Straight six-loop cross-correlation; independent of the im2col path.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const auto K = static_cast<std::ptrdiff_t>(w.dim(2));
    const std::size_t OH = conv_out_extent(x.h(), w.dim(2), stride, pad);
    const std::size_t OW = conv_out_extent(x.w(), w.dim(3), stride, pad);
    Tensor out = Tensor::nchw(x.n(), w.dim(0), OH, OW);
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t o = 0; o < w.dim(0); ++o)
            for (std::size_t i = 0; i < OH; ++i)
                for (std::size_t j = 0; j < OW; ++j) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < x.c(); ++c)
                        for (std::ptrdiff_t a = 0; a < K; ++a)
                            for (std::ptrdiff_t e = 0; e < K; ++e) {
                                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i) * stride + a - pad;
                                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j) * stride + e - pad;
                                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(x.h()) ||
                                    iw >= static_cast<std::ptrdiff_t>(x.w()))
                                    continue;
                                acc += w.at(o, c, a, e) * x.at(n, c, ih, iw);
                            }
                    out.at(n, o, i, j) = acc;
                }
    return out;
}

} // namespace

TEST_CASE("conv2d: 1x1 kernel scales the input") {
    Tensor x = Tensor::nchw(1, 1, 3, 3, 1.0);
    Tensor w({1, 1, 1, 1}, 2.0);
    Tensor b({1});
    Tensor y = conv2d(x, w, b, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (double v : y.values()) CHECK(v == 2.0);
}

TEST_CASE("conv2d: delta impulse reproduces the flipped kernel") {
    Tensor x = Tensor::nchw(1, 1, 5, 5);
    x.at(0, 0, 2, 2) = 1.0;
    Tensor w({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor y = conv2d(x, w, Tensor({1}), 1, 1);
    for (int a = 0; a < 3; ++a)
        for (int e = 0; e < 3; ++e) CHECK(y.at(0, 0, 2 + 1 - a, 2 + 1 - e) == w.at(0, 0, a, e));
    CHECK(y.at(0, 0, 0, 0) == 0.0);
}

TEST_CASE("conv2d: matches naive loops for stride 1 and 2") {
    Rng rng(7);
    for (int stride : {1, 2}) {
        Tensor x = random_tensor({2, 3, 9, 8}, rng);
        Tensor w = random_tensor({4, 3, 3, 3}, rng);
        Tensor b = random_tensor({4}, rng);
        CHECK(max_abs_diff(conv2d(x, w, b, stride, 1), naive_conv(x, w, b, stride, 1)) < 1e-12);
    }
}

TEST_CASE("conv2d: finite-difference gradients of a sum loss") {
    Rng rng(11);
    for (int stride : {1, 2}) {
        Parameter input("input", random_tensor({1, 2, 8, 8}, rng));
        Parameter kernels("kernels", random_tensor({4, 2, 3, 3}, rng));
        Parameter bias("bias", random_tensor({4}, rng));
        // A weighted sum keeps the loss from being linear in a single direction.
        Tensor weights = random_tensor({1, 4, stride == 1 ? 8u : 4u, stride == 1 ? 8u : 4u}, rng);
        auto loss = [&](bool grad) {
            Tensor y = conv2d(input.value, kernels.value, bias.value, stride, 1);
            double l = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) l += weights[i] * y[i];
            if (grad) {
                Tensor gx;
                conv2d_backward(input.value, kernels.value, weights, stride, 1, &gx, &kernels.grad, &bias.grad);
                input.grad += gx;
            }
            return l;
        };
        GradCheckOptions opts;
        opts.samples = 200;
        auto report = grad_check(loss, {&input, &kernels, &bias}, 1e-4, opts);
        INFO("worst " << report.worst_parameter << " rel " << report.max_relative_error);
        CHECK(report.passed);
    }
}

TEST_CASE("conv2d: channel mismatch names the extents") {
    Tensor x = Tensor::nchw(1, 3, 4, 4);
    Tensor w({2, 2, 3, 3});
    try {
        (void)conv2d(x, w, Tensor({2}), 1, 1);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2 input channels") != std::string::npos);
        CHECK(msg.find("[1x3x4x4]") != std::string::npos);
    }
    CHECK_THROWS_AS((void)conv2d(x, Tensor({2, 3, 2, 2}), Tensor({2}), 1, 0), ContractError);
}

TEST_CASE("celu2: closed forms, bounds and symmetry") {
    Tensor zeros = Tensor::nchw(2, 3, 4, 4);
    Tensor z = celu2(zeros);
    CHECK(z.shape() == Shape{2, 6, 4, 4});
    CHECK(max_abs(z) == 0.0);

    Tensor one = Tensor::nchw(1, 1, 1, 1, 1.0);
    Tensor o = celu2(one);
    CHECK(o[0] == 1.0);
    CHECK(o[1] == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));

    Rng rng(3);
    Tensor x = random_tensor({2, 3, 5, 5}, rng, -4.0, 4.0);
    Tensor neg = x;
    neg *= -1.0;
    Tensor a = celu2(x), b = celu2(neg);
    const std::size_t P = x.plane();
    bool swapped = true;
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < P; ++i)
                swapped = swapped && a.plane_ptr(n, c)[i] == b.plane_ptr(n, c + 3)[i] &&
                          a.plane_ptr(n, c + 3)[i] == b.plane_ptr(n, c)[i];
    CHECK(swapped);
    for (double v : a.values()) CHECK(v >= -1.0);
}

TEST_CASE("celu2, channel affine and upsampling: finite-difference gradients") {
    Rng rng(5);
    Parameter x("x", random_tensor({2, 2, 4, 4}, rng, -2.0, 2.0));
    Parameter gamma("gamma", random_tensor({4}, rng));
    Parameter beta("beta", random_tensor({4}, rng));
    Tensor weights = random_tensor({2, 4, 8, 8}, rng);
    auto loss = [&](bool grad) {
        Tensor a = celu2(x.value);
        Tensor b = channel_affine(a, gamma.value, beta.value);
        Tensor c = upsample2(b);
        double l = 0.0;
        for (std::size_t i = 0; i < c.size(); ++i) l += weights[i] * c[i];
        if (grad) {
            Tensor gb = upsample2_backward(weights);
            Tensor ga = channel_affine_backward(a, gamma.value, gb, &gamma.grad, &beta.grad);
            x.grad += celu2_backward(x.value, ga);
        }
        return l;
    };
    auto report = grad_check(loss, {&x, &gamma, &beta}, 1e-4);
    INFO(report.worst_parameter);
    CHECK(report.passed);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
    Parameter p("p", Tensor({3}, std::vector<double>{1.0, -2.0, 3.0}));
    AdamState st;
    adam_step({&p}, st);
    CHECK(st.step == 1);
    CHECK(p.value == Tensor({3}, std::vector<double>{1.0, -2.0, 3.0}));
}

TEST_CASE("adam: bias-corrected first step moves by the learning rate") {
    Parameter p("p", Tensor({1}, 0.5));
    p.grad[0] = 1.0;
    AdamState st(AdamConfig{.learning_rate = 1e-3});
    adam_step({&p}, st);
    CHECK(p.value[0] - 0.5 == doctest::Approx(-1e-3).epsilon(1e-6));
}

TEST_CASE("adam: learning rate halves every decay period") {
    Parameter p("p", Tensor({1}));
    AdamState st(AdamConfig{.learning_rate = 1e-3, .decay_factor = 0.5, .decay_period = 2000});
    for (int i = 0; i < 1999; ++i) adam_step({&p}, st);
    CHECK(st.learning_rate == 1e-3);
    adam_step({&p}, st);
    CHECK(st.learning_rate == doctest::Approx(5e-4).epsilon(1e-15));
    for (int i = 0; i < 2000; ++i) adam_step({&p}, st);
    CHECK(st.learning_rate == doctest::Approx(2.5e-4).epsilon(1e-15));
}

TEST_CASE("adam: non-finite gradient aborts the step naming the parameter") {
    Parameter a("layer.a", Tensor({2}, 1.0));
    Parameter b("layer.b", Tensor({2}, 1.0));
    a.grad[0] = 0.5;
    b.grad[1] = std::numeric_limits<double>::quiet_NaN();
    AdamState st;
    try {
        adam_step({&a, &b}, st);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layer.b") != std::string::npos);
    }
    CHECK(a.value[0] == 1.0);
    CHECK(st.step == 0);
}

TEST_CASE("grad_check: quadratic loss") {
    Rng rng(1);
    Parameter p("p", random_tensor({10, 10}, rng));
    auto loss = [&](bool grad) {
        double l = 0.0;
        for (double v : p.value.values()) l += 0.5 * v * v;
        if (grad) p.grad += p.value;
        return l;
    };
    // Central differences are exact on quadratics for any step; a wider step
    // keeps cancellation noise in the summed loss below the tolerance.
    GradCheckOptions opts;
    opts.step = 1e-3;
    auto report = grad_check(loss, {&p}, 1e-8, opts);
    CHECK(report.coordinates == 64);
    CHECK(report.max_relative_error < 1e-8);
    CHECK(report.passed);
}

TEST_CASE("unet: parameter and input gradients match finite differences") {
    Rng rng(21);
    UNetConfig cfg;
    cfg.in_channels = 2;
    cfg.out_channels = 3;
    cfg.widths = {3, 4, 5};
    cfg.convs_per_block = 2;
    cfg.normalize = true;
    cfg.zero_head = false;
    UNet net("net", cfg, rng);
    ParamRefs params;
    net.collect(params);
    Parameter input("input", random_tensor({2, 2, 8, 8}, rng));
    params.push_back(&input);
    Tensor weights = random_tensor({2, 3, 8, 8}, rng);
    auto loss = [&](bool grad) {
        UNet::Cache cache;
        Tensor y = net.forward(input.value, grad ? &cache : nullptr);
        double l = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) l += weights[i] * y[i] + 0.1 * y[i] * y[i];
        if (grad) {
            Tensor gy = weights;
            for (std::size_t i = 0; i < y.size(); ++i) gy[i] += 0.2 * y[i];
            input.grad += net.backward(cache, gy, true);
        }
        return l;
    };
    GradCheckOptions opts;
    opts.samples = 300;
    auto report = grad_check(loss, params, 1e-4, opts);
    INFO(report.worst_parameter << " " << report.max_relative_error);
    CHECK(report.passed);
}

TEST_CASE("unet: shrinks depth for small inputs and preserves spatial extent") {
    Rng rng(2);
    UNetConfig cfg;
    cfg.widths = {4, 4, 4, 4};
    UNet net("n", cfg, rng);
    CHECK(net.scales_for(64, 64) == 4);
    CHECK(net.scales_for(4, 4) == 3);
    CHECK(net.scales_for(2, 2) == 2);
    CHECK(net.scales_for(1, 1) == 1);
    CHECK(net.scales_for(6, 6) == 2);
    for (std::size_t s : {1u, 2u, 4u, 6u, 16u}) {
        Tensor y = net.forward(Tensor::nchw(1, 1, s, s, 0.3));
        CHECK(y.shape() == Shape{1, 1, s, s});
    }
}

TEST_CASE("ops are deterministic") {
    Rng a(99), b(99);
    Tensor x1 = random_tensor({2, 3, 16, 16}, a), x2 = random_tensor({2, 3, 16, 16}, b);
    Rng ia(5), ib(5);
    UNetConfig cfg;
    cfg.in_channels = 3;
    cfg.zero_head = false;
    UNet n1("n", cfg, ia), n2("n", cfg, ib);
    CHECK(n1.forward(x1) == n2.forward(x2));
}

TEST_CASE("archive: byte layout of a single tensor") {
    TensorArchive ar;
    ar.emplace_back("ab", Tensor({2}, std::vector<double>{1.0, -2.0}));
    auto bytes = encode_archive(ar);
    REQUIRE(bytes.size() == 4 + 2 + 4 + 2 + 2 + 1 + 4 + 16);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "HFLW");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 0);
    CHECK(bytes[6] == 1);
    CHECK(bytes[10] == 2);
    CHECK(bytes[12] == 'a');
    CHECK(bytes[14] == 1);
    CHECK(bytes[15] == 2);
    // 1.0 = 0x3FF0000000000000 little-endian
    CHECK(bytes[19 + 7] == 0x3F);
    CHECK(bytes[19 + 6] == 0xF0);
}

TEST_CASE("archive: random archives round-trip exactly") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        TensorArchive ar;
        const auto count = rng.uniform_int(0, 6);
        for (int k = 0; k < count; ++k) {
            Shape shape(static_cast<std::size_t>(rng.uniform_int(0, 4)));
            for (auto& d : shape) d = static_cast<std::size_t>(rng.uniform_int(1, 4));
            ar.emplace_back("t" + std::to_string(k), random_tensor(shape, rng, -1e6, 1e6));
        }
        auto back = decode_archive(encode_archive(ar));
        CHECK(back == ar);
    }
}

TEST_CASE("archive: corrupt input is rejected") {
    TensorArchive ar;
    ar.emplace_back("x", Tensor({3}, 1.0));
    auto bytes = encode_archive(ar);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_archive(truncated), ContractError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_archive(bad_magic), ContractError);
    CHECK_THROWS_AS(find_tensor(ar, "missing"), ContractError);
}
