// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "helpers.hpp"
#include "kwsim/model.hpp"
#include "kwsim/rng.hpp"
#include "kwsim/sinc.hpp"

using namespace kwsim;
using testutil::random_audio;
using testutil::randomize_model;
using testutil::tiny_arch;

// ===== Band-pass kernels ====================================================

TEST_CASE("band-pass kernels are symmetric with the analytic center tap") {
    auto g = sinc_bandpass_kernel(0.1, 0.2, 15);
    REQUIRE(g.size() == 15);
    // Center tap: 2*(f2-f1), window value exactly 1 there.
    CHECK(g[7] == Catch::Approx(0.2).margin(1e-15));
    for (int i = 0; i < 15; ++i) CHECK(g[size_t(i)] == g[size_t(14 - i)]);
    auto b = binarize_kernels({g});
    for (int i = 0; i < 15; ++i) CHECK(b.sign(0, i) == b.sign(0, 14 - i));
}

TEST_CASE("cutoff validation rejects empty or out-of-range bands") {
    CHECK_THROWS_AS(sinc_bandpass_kernel(0.0, 0.2, 15), InvalidCutoffs);
    CHECK_THROWS_AS(sinc_bandpass_kernel(-0.1, 0.2, 15), InvalidCutoffs);
    CHECK_THROWS_AS(sinc_bandpass_kernel(0.2, 0.2, 15), InvalidCutoffs);
    CHECK_THROWS_AS(sinc_bandpass_kernel(0.3, 0.2, 15), InvalidCutoffs);
    CHECK_THROWS_AS(sinc_bandpass_kernel(0.1, 0.51, 15), InvalidCutoffs);
    CHECK_THROWS_AS(sinc_bandpass_kernel(0.1, 0.2, 14), InvalidCutoffs);
    CHECK_NOTHROW(sinc_bandpass_kernel(0.1, 0.5, 15));
}

TEST_CASE("single-signed binarized kernels are rejected as degenerate") {
    // A near-DC low-pass band keeps every windowed tap positive at 15 taps.
    auto g = sinc_bandpass_kernel(1e-6, 0.03, 15);
    bool anyNeg = false;
    for (double v : g) anyNeg = anyNeg || v < 0.0;
    REQUIRE_FALSE(anyNeg);
    CHECK_THROWS_AS(binarize_kernels({g}), InvalidCutoffs);
    // A proper band passes.
    CHECK_NOTHROW(binarize_kernels({sinc_bandpass_kernel(0.05, 0.25, 15)}));
}

TEST_CASE("cutoff gradients match finite differences of the kernel") {
    const double f1 = 0.07, f2 = 0.23, h = 1e-6;
    const int k = 15;
    auto d2 = sinc_kernel_grad(f2, k, true);
    auto gp = sinc_bandpass_kernel(f1, f2 + h, k);
    auto gm = sinc_bandpass_kernel(f1, f2 - h, k);
    for (int i = 0; i < k; ++i)
        CHECK(d2[size_t(i)] == Catch::Approx((gp[size_t(i)] - gm[size_t(i)]) / (2 * h)).margin(1e-4));
    auto d1 = sinc_kernel_grad(f1, k, false);
    auto hp = sinc_bandpass_kernel(f1 + h, f2, k);
    auto hm = sinc_bandpass_kernel(f1 - h, f2, k);
    for (int i = 0; i < k; ++i)
        CHECK(d1[size_t(i)] == Catch::Approx((hp[size_t(i)] - hm[size_t(i)]) / (2 * h)).margin(1e-4));
}

TEST_CASE("bit-plane front-end convolution equals the direct product") {
    RngStream rng = RngStream::derive(53, {1});
    for (int trial = 0; trial < 200; ++trial) {
        const int L = int(rng.uniform_int(3, 90));
        const int k = 1 + 2 * int(rng.uniform_int(1, 12));
        const int F = int(rng.uniform_int(1, 4));
        QTensor audio = random_audio(L, rng);
        BinTensor w(F, k);
        for (int f = 0; f < F; ++f)
            for (int i = 0; i < k; ++i) w.set(f, i, rng.next_u64() & 1 ? +1 : -1);
        IntTensor got = sinc_conv(audio, w);
        for (int f = 0; f < F; ++f) {
            for (int t = 0; t < L; ++t) {
                int32_t want = 0;
                for (int i = 0; i < k; ++i) {
                    const int p = t + i - (k - 1) / 2;
                    const int32_t v = (p >= 0 && p < L) ? audio.raw(size_t(p)) : 0;
                    want += w.sign(f, i) * v;
                }
                REQUIRE(got.at(f, t) == want);
            }
        }
    }
}

TEST_CASE("silence through the front end yields the bias sign everywhere") {
    QTensor audio({50}, kActivationFmt); // all-zero raws
    BinTensor w(2, 15);
    for (int i = 0; i < 15; ++i) {
        w.set(0, i, i % 2 ? +1 : -1);
        w.set(1, i, i % 3 ? -1 : +1);
    }
    IntTensor s = sinc_conv(audio, w);
    for (int t = 0; t < 50; ++t) {
        CHECK(s.at(0, t) == 0);
        CHECK(s.at(1, t) == 0);
    }
    const int32_t bias[2] = {+3, -2};
    BinTensor y = sign_activation(s, std::span<const int32_t>(bias, 2));
    for (int t = 0; t < 50; ++t) {
        CHECK(y.sign(0, t) == +1);
        CHECK(y.sign(1, t) == -1);
    }
}

// ===== BN folding ===========================================================

TEST_CASE("BN folding frozen cases") {
    auto r0 = fold_bn(1, 0, 0, 1, 0);
    CHECK(r0.bias == 0);
    CHECK(r0.polarity == +1);
    // gamma=1, beta=2, mu=3, sigma=1: threshold x >= 1, bias -1.
    auto r1 = fold_bn(1, 2, 3, 1, 0);
    CHECK(r1.bias == -1);
    CHECK(r1.polarity == +1);
    // Negative gamma flips the comparison: +1 iff x <= 5.
    auto r2 = fold_bn(-1, 2, 3, 1, 0);
    CHECK(r2.bias == -6);
    CHECK(r2.polarity == -1);
    // The activation offset shifts the threshold like beta.
    CHECK(fold_bn(1, 0, 3, 1, 2).bias == fold_bn(1, 2, 3, 1, 0).bias);
}

TEST_CASE("BN folding is exact over the integer input range") {
    RngStream rng = RngStream::derive(53, {2});
    int checked = 0;
    for (int trial = 0; trial < 400; ++trial) {
        const double gamma = (rng.next_u64() & 1 ? 1 : -1) * rng.uniform(0.05, 4.0);
        const double beta = rng.uniform(-6.0, 6.0);
        const double mu = rng.uniform(-40.0, 40.0);
        const double sigma = rng.uniform(0.1, 30.0);
        const double off = rng.uniform(-4.0, 4.0);
        auto fb = fold_bn(gamma, beta, mu, sigma, off);
        for (int x = -90; x <= 90; ++x) {
            const double bn = gamma * (double(x) - mu) / sigma + beta + off;
            const int want = bn >= 0.0 ? +1 : -1;
            const int folded = (x + fb.bias) >= 0 ? +1 : -1;
            REQUIRE(want == fb.polarity * folded);
            ++checked;
        }
    }
    // Exact integer-tie cases in both polarities.
    for (int x = -90; x <= 90; ++x) {
        const double bn_pos = 1.0 * (x - 3.0) + 2.0;           // zero at x = 1
        auto fp = fold_bn(1, 2, 3, 1, 0);
        REQUIRE((bn_pos >= 0 ? +1 : -1) == fp.polarity * ((x + fp.bias) >= 0 ? +1 : -1));
        const double bn_neg = -1.0 * (x - 3.0) + 2.0;          // zero at x = 5
        auto fn = fold_bn(-1, 2, 3, 1, 0);
        REQUIRE((bn_neg >= 0 ? +1 : -1) == fn.polarity * ((x + fn.bias) >= 0 ? +1 : -1));
    }
    CHECK(checked == 400 * 181);
}

TEST_CASE("degenerate BN parameters are rejected") {
    CHECK_THROWS_AS(fold_bn(1, 0, 0, 0, 0), DegenerateBN);
    CHECK_THROWS_AS(fold_bn(1, 0, 0, -1, 0), DegenerateBN);
    CHECK_THROWS_AS(fold_bn(0, 0, 0, 1, 0), DegenerateBN);
}

// ===== Architecture =========================================================

TEST_CASE("default architecture parameter count sits at the budget") {
    ModelSpec m = make_model(ArchConfig{});
    ParamCount c = count_params(m);
    CHECK(c.block_weights == 112320);
    CHECK(c.classifier == 4810);
    CHECK(c.deploy() == 119074);
    CHECK(c.train() == 121906);
    // Both accountings within ±10% of the 125K budget.
    for (int64_t n : {c.deploy(), c.train()}) {
        CHECK(n >= 112500);
        CHECK(n <= 137500);
    }
    // Group ladder: groups = in_channels / 24.
    std::vector<int> g;
    for (auto& b : m.blocks) g.push_back(b.groups);
    CHECK(g == std::vector<int>{1, 5, 10, 10, 20});
}

TEST_CASE("architecture validation rejects indivisible channel plans") {
    ArchConfig a;
    a.channels = {100, 200, 200, 400, 400}; // 100 % 24 != 0 at block 2 input
    CHECK_THROWS_AS(make_model(a), std::invalid_argument);
    ArchConfig b;
    b.channels = {};
    b.pools = {};
    CHECK_THROWS_AS(make_model(b), std::invalid_argument);
}

// ===== Backend equivalence ==================================================

TEST_CASE("digital and zero-noise in-memory backends agree bit-exactly") {
    RngStream rng = RngStream::derive(53, {3});
    ModelSpec m = make_model(tiny_arch());
    randomize_model(m, rng); // biases include odd values (unconstrained level)
    ForwardOptions dig;
    ForwardOptions imc;
    imc.backend = Backend::imc;
    for (int i = 0; i < 10; ++i) {
        QTensor audio = random_audio(m.input_len, rng);
        imc.sample_key = uint64_t(i);
        QTensor a = forward(m, audio, dig);
        QTensor b = forward(m, audio, imc);
        REQUIRE(a.raws() == b.raws());
    }
}

TEST_CASE("forward is deterministic for a fixed model, input and options") {
    RngStream rng = RngStream::derive(53, {4});
    ModelSpec m = make_model(tiny_arch());
    randomize_model(m, rng);
    QTensor audio = random_audio(m.input_len, rng);
    ForwardOptions opt;
    opt.backend = Backend::imc;
    opt.noise.sa_sigma = 1.0;
    opt.noise.mav_offset_sigma = 0.5;
    opt.noise.seed = 77;
    opt.sample_key = 3;
    QTensor a = forward(m, audio, opt);
    QTensor b = forward(m, audio, opt);
    CHECK(a.raws() == b.raws());
    CHECK(argmax_class(a) == argmax_class(b));
}

TEST_CASE("accuracy degrades monotonically as sense-amp noise grows") {
    RngStream rng = RngStream::derive(53, {5});
    ModelSpec m = make_model(tiny_arch());
    randomize_model(m, rng, 10);
    // Labels: the model's own zero-noise decisions.
    const int N = 20;
    std::vector<QTensor> audios;
    std::vector<int> labels;
    for (int i = 0; i < N; ++i) {
        audios.push_back(random_audio(m.input_len, rng));
        labels.push_back(argmax_class(forward(m, audios.back())));
    }
    const double sigmas[4] = {0.0, 2.0, 8.0, 32.0};
    int prev = N + 1;
    for (double s : sigmas) {
        ForwardOptions opt;
        opt.backend = Backend::imc;
        opt.noise.sa_sigma = s;
        opt.noise.seed = 11;
        int agree = 0;
        for (int i = 0; i < N; ++i) {
            opt.sample_key = uint64_t(i);
            if (argmax_class(forward(m, audios[size_t(i)], opt)) == labels[size_t(i)]) ++agree;
        }
        CHECK(agree <= prev);
        prev = agree;
    }
}

TEST_CASE("mel initialization yields valid binarizable banks at any width") {
    for (int F : {1, 4, 8, 24, 48}) {
        for (int k : {9, 15, 31}) {
            SincLayerSpec s;
            s.num_filters = F;
            s.kernel_size = k;
            init_cutoffs_mel(s, 16000);
            CHECK_NOTHROW(rebuild_sinc_kernels(s, 16000));
            for (int i = 0; i < F; ++i) {
                CHECK(s.low_hz[size_t(i)] > 0.0);
                CHECK(s.band_hz[size_t(i)] > 0.0);
                CHECK(s.low_hz[size_t(i)] + s.band_hz[size_t(i)] <= 8000.0);
            }
        }
    }
}

TEST_CASE("argmax breaks ties toward the first class") {
    QTensor s({4}, kActivationFmt);
    s.raw(0) = 5;
    s.raw(1) = 9;
    s.raw(2) = 9;
    s.raw(3) = -1;
    CHECK(argmax_class(s) == 1);
}
