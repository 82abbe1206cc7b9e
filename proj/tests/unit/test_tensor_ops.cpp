#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ehrgan/error.hpp"
#include "ehrgan/ops.hpp"
#include "ehrgan/rng.hpp"

using namespace ehrgan;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Direct sliding-window correlation, written independently of the GEMM path.
Tensor conv_oracle(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t stride) {
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), w = k.dim(0), F = k.dim(2);
    const std::size_t To = (T - w) / stride + 1;
    Tensor y({B, To, F});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t t = 0; t < To; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                double s = b[f];
                for (std::size_t j = 0; j < w; ++j)
                    for (std::size_t c = 0; c < C; ++c) s += x.at(n, t * stride + j, c) * k.at(j, c, f);
                y.at(n, t, f) = s;
            }
    return y;
}

}  // namespace

TEST_CASE("conv1d identity and bias-only cases") {
    Tensor x({1, 1, 1}, 3.5), k({1, 1, 1}, 1.0), b({1}, 0.0);
    CHECK(conv1d(x, k, b)[0] == 3.5);

    Rng rng(1);
    Tensor zeros({2, 6, 3}, 0.0);
    Tensor kk = random_tensor({2, 3, 4}, rng);
    Tensor bias({4}, std::vector<Real>{0.5, -1, 2, 0});
    Tensor y = conv1d(zeros, kk, bias);
    CHECK(y.shape() == Shape{2, 5, 4});
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == bias[i % 4]);
}

TEST_CASE("conv1d matches the sliding-window oracle") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        Tensor x = random_tensor({1, 6, 3}, rng), k = random_tensor({2, 3, 2}, rng), b = random_tensor({2}, rng);
        Tensor y = conv1d(x, k, b), o = conv_oracle(x, k, b, 1);
        REQUIRE(y.shape() == o.shape());
        for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(o[i]).epsilon(1e-12));

        const std::size_t stride = 1 + seed % 3;
        Tensor x2 = random_tensor({2, 9, 2}, rng), k2 = random_tensor({3, 2, 3}, rng), b2 = random_tensor({3}, rng);
        Tensor y2 = conv1d(x2, k2, b2, stride), o2 = conv_oracle(x2, k2, b2, stride);
        REQUIRE(y2.shape() == o2.shape());
        for (std::size_t i = 0; i < y2.size(); ++i) CHECK(y2[i] == doctest::Approx(o2[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv1d rejects shape mismatches") {
    Tensor x({1, 4, 3}), k({2, 2, 5}), b({5});
    CHECK_THROWS_AS(conv1d(x, k, b), ShapeError);
    Tensor k2({5, 3, 1}), b2({1});
    CHECK_THROWS_AS(conv1d(x, k2, b2), ShapeError);
    Tensor k3({2, 3, 2}), b3({3});
    CHECK_THROWS_AS(conv1d(x, k3, b3), ShapeError);
}

TEST_CASE("deconv1d identity and length formula") {
    Rng rng(3);
    Tensor y = random_tensor({1, 4, 2}, rng);
    Tensor eye({1, 2, 2}, std::vector<Real>{1, 0, 0, 1});
    Tensor zero_bias({2}, 0.0);
    CHECK(deconv1d(y, eye, zero_bias, 1) == y);

    Tensor one_ch({1, 2, 1}, 1.0), k({3, 1, 1}, 1.0), b({1}, 0.0);
    Tensor out = deconv1d(one_ch, k, b, 2);
    CHECK(out.shape() == Shape{1, 5, 1});
    // taps at 0..2 and 2..4 overlap at index 2
    CHECK(out.storage() == std::vector<Real>{1, 1, 2, 1, 1});
    CHECK_THROWS_AS(deconv1d(one_ch, Tensor({3, 1, 2}), b, 2), ShapeError);
}

TEST_CASE("conv1d and deconv1d are adjoint") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(100 + seed);
        const std::size_t B = 1 + rng.index(2), C = 1 + rng.index(4), F = 1 + rng.index(4);
        const std::size_t w = 1 + rng.index(4), s = 1 + rng.index(3), To = 1 + rng.index(6);
        const std::size_t T = (To - 1) * s + w;
        Tensor u = random_tensor({B, T, C}, rng), v = random_tensor({B, To, F}, rng), k = random_tensor({w, C, F}, rng);
        Tensor zf({F}, 0.0), zc({C}, 0.0);
        const double lhs = dot(conv1d(u, k, zf, s), v);
        const double rhs = dot(u, deconv1d(v, k, zc, s));
        CHECK(std::abs(lhs - rhs) <= 1e-10);
    }
}

TEST_CASE("max_over_time") {
    Tensor c({1, 4, 3}, 2.0);
    auto r = max_over_time(c);
    for (std::size_t f = 0; f < 3; ++f) {
        CHECK(r.values[f] == 2.0);
        CHECK(r.argmax[f] == 0);
    }

    Rng rng(9);
    Tensor single = random_tensor({1, 1, 4}, rng);
    CHECK(max_over_time(single).values.storage() == single.storage());

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng r2(seed);
        Tensor m = random_tensor({1, 5, 4}, r2);
        auto p = max_over_time(m);
        for (std::size_t f = 0; f < 4; ++f) {
            double best = -1e300;
            for (std::size_t t = 0; t < 5; ++t) best = std::max(best, m.at(0, t, f));
            CHECK(p.values[f] == best);
        }
        // permuting the time axis leaves the maxima unchanged
        std::vector<std::size_t> perm(5);
        std::iota(perm.begin(), perm.end(), 0);
        r2.shuffle(perm);
        Tensor permuted({1, 5, 4});
        for (std::size_t t = 0; t < 5; ++t)
            for (std::size_t f = 0; f < 4; ++f) permuted.at(0, t, f) = m.at(0, perm[t], f);
        CHECK(max_over_time(permuted).values == p.values);
    }
}

TEST_CASE("mix_latent componentwise definition") {
    Tensor h({2}, std::vector<Real>{1, 2}), z({2}, std::vector<Real>{5, 7});
    CHECK(mix_latent(h, z, Tensor({2}, std::vector<Real>{1, 0})).storage() == std::vector<Real>{5, 2});
    CHECK(mix_latent(h, z, Tensor({2}, 0.0)) == h);
    CHECK(mix_latent(h, z, Tensor({2}, 1.0)) == z);
    CHECK_THROWS_AS(mix_latent(h, z, Tensor({2}, 0.5)), InvalidArgument);
    CHECK_THROWS_AS(mix_latent(h, Tensor({3}), Tensor({2})), ShapeError);
}

TEST_CASE("loss kernels: analytic values") {
    Graph g;
    Var p = g.constant(Tensor({1}, 0.5));
    CHECK(nn::binary_xent(p, {1.0}).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    Tensor uniform({2, 3}, 0.7);
    Tensor probs = nn::softmax(uniform);
    for (auto v : probs.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

    Var logits = g.constant(Tensor({1, 2}, 0.0));
    CHECK(nn::softmax_xent(logits, {1}).value()[0] == doctest::Approx(std::log(2.0)));
    CHECK_THROWS_AS(nn::softmax_xent(logits, {2}), InvalidArgument);
    CHECK_THROWS_AS(nn::binary_xent(p, {1.5}), InvalidArgument);
    Var nan_p = g.constant(Tensor({1}, std::nan("")));
    CHECK_THROWS_AS(nn::binary_xent(nan_p, {1.0}), InvalidArgument);

    // fused sigmoid form agrees with sigmoid + binary_xent away from the clamp
    Var l = g.constant(Tensor({3}, std::vector<Real>{-2, 0.3, 4}));
    const double fused = nn::sigmoid_xent(l, {0.9, 0, 1}).value()[0];
    const double split = nn::binary_xent(nn::sigmoid(l), {0.9, 0, 1}).value()[0];
    CHECK(fused == doctest::Approx(split).epsilon(1e-12));
}

TEST_CASE("batch_norm normalizes each channel") {
    Rng rng(5);
    Graph g;
    Tensor x = random_tensor({6, 3, 4}, rng, -3, 5);
    Tensor rm({4}, 0.0), rv({4}, 1.0);
    Var y = nn::batch_norm(g.constant(x), g.constant(Tensor({4}, 1.0)), g.constant(Tensor({4}, 0.0)), rm, rv,
                           {.momentum = 0.1, .eps = 1e-14, .training = true});
    const Tensor& yv = y.value();
    const std::size_t N = 18;
    for (std::size_t c = 0; c < 4; ++c) {
        double m = 0, v = 0;
        for (std::size_t i = 0; i < N; ++i) m += yv[i * 4 + c];
        m /= N;
        for (std::size_t i = 0; i < N; ++i) v += (yv[i * 4 + c] - m) * (yv[i * 4 + c] - m);
        v /= N;
        CHECK(std::abs(m) < 1e-8);
        CHECK(std::abs(v - 1) < 1e-8);
        CHECK(rm[c] != 0.0);
    }
    Tensor one_row({1, 4}, 1.0);
    CHECK_THROWS_AS(nn::batch_norm(g.constant(one_row), g.constant(Tensor({4}, 1.0)), g.constant(Tensor({4}, 0.0)), rm,
                                   rv, {}),
                    InvalidArgument);
}

TEST_CASE("backward: linear, disconnected, and repeated calls") {
    ParamSet ps;
    ps.add("a", Tensor({2, 3}, 0.3), true);
    ps.add("b", Tensor({4}, 1.0), false);
    Graph g;
    Var loss = nn::sum(g.param(ps["a"]));
    g.param(ps["b"]);
    g.backward(loss);
    for (auto v : ps["a"].grad.values()) CHECK(v == 1.0);
    for (auto v : ps["b"].grad.values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(g.backward(loss), Error);
    g.clear();
    Var again = nn::sum(g.param(ps["a"]));
    g.backward(again);
    for (auto v : ps["a"].grad.values()) CHECK(v == 2.0);
}
