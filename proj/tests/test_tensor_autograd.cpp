#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mabert/gradcheck.hpp"
#include "mabert/ops.hpp"
#include "test_util.hpp"

using namespace mabert;
using mabert::testing::random_tensor;

TEST_CASE("matmul contracts inner extents") {
    SUBCASE("identity") {
        Tensor<double> eye({3, 3});
        for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
        Tensor<double> v({3, 1}, {0.25, -2.0, 7.5});
        CHECK(matmul(constant(eye), constant(v)).value() == v);
    }
    SUBCASE("hand contraction") {
        auto out = matmul(constant(Tensor<double>({2, 2}, {1, 2, 3, 4})), constant(Tensor<double>({2, 1}, {1, 1})));
        CHECK(out.value() == Tensor<double>({2, 1}, {3, 7}));
    }
    SUBCASE("annihilator") {
        std::mt19937_64 rng(3);
        auto out = matmul(constant(Tensor<float>({2, 3})), constant(random_tensor<float>({3, 4}, rng)));
        CHECK(out.value() == Tensor<float>({2, 4}));
    }
    SUBCASE("batched broadcast matches per-batch products") {
        std::mt19937_64 rng(11);
        auto a = random_tensor<double>({2, 3, 4, 5}, rng);
        auto b = random_tensor<double>({3, 5, 2}, rng);
        auto out = matmul(constant(a), constant(b)).value();
        REQUIRE(out.shape() == Shape{2, 3, 4, 2});
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                for (std::size_t m = 0; m < 4; ++m)
                    for (std::size_t n = 0; n < 2; ++n) {
                        double ref = 0;
                        for (std::size_t k = 0; k < 5; ++k) ref += a.at({i, j, m, k}) * b.at({j, k, n});
                        CHECK(out.at({i, j, m, n}) == doctest::Approx(ref).epsilon(1e-12));
                    }
    }
    SUBCASE("shape mismatch names both shapes") {
        try {
            matmul(constant(Tensor<double>({2, 3})), constant(Tensor<double>({4, 2})));
            FAIL("expected DimensionError");
        } catch (const DimensionError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("[2,3]") != std::string::npos);
            CHECK(msg.find("[4,2]") != std::string::npos);
        }
    }
}

TEST_CASE("elementwise analytic values") {
    CHECK(softplus(constant(Tensor<double>::scalar(0.0))).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(silu(constant(Tensor<double>::scalar(0.0))).value().item() == 0.0);
    // Extended-precision reference for ln(1 + e^50).
    const long double ref = ::log1pl(::expl(50.0L));
    const double got = softplus(constant(Tensor<double>::scalar(50.0))).value().item();
    CHECK(std::abs(static_cast<long double>(got) - ref) < 1e-9L);
    CHECK(std::isfinite(softplus(constant(Tensor<float>::scalar(500.0f))).value().item()));
    CHECK(softplus(constant(Tensor<float>::scalar(-500.0f))).value().item() >= 0.0f);

    SUBCASE("broadcast add of bias and mask") {
        auto x = constant(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
        auto bias = constant(Tensor<double>({3}, {10, 20, 30}));
        CHECK((x + bias).value() == Tensor<double>({2, 3}, {11, 22, 33, 14, 25, 36}));
        auto col = constant(Tensor<double>({2, 1}, {0, 1}));
        CHECK((x * col).value() == Tensor<double>({2, 3}, {0, 0, 0, 4, 5, 6}));
        CHECK_THROWS_AS(x + constant(Tensor<double>({2})), DimensionError);
    }
}

TEST_CASE("masked_softmax examples") {
    SUBCASE("symmetry") {
        auto y = softmax(constant(Tensor<double>({3}, {2.5, 2.5, 2.5})));
        for (double v : y.value().values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
        Tensor<double> full({3}, {1, 1, 1});
        auto z = masked_softmax(constant(Tensor<double>({3}, {2.5, 2.5, 2.5})), &full);
        CHECK(z.value() == y.value());
    }
    SUBCASE("single valid token") {
        Tensor<float> m({3}, {0, 1, 0});
        auto y = masked_softmax(constant(Tensor<float>({3}, {9, -4, 7})), &m);
        CHECK(y.value() == Tensor<float>({3}, {0, 1, 0}));
    }
    SUBCASE("softmax over valid entries only") {
        // Independent two-term oracle: 1 / (1 + e^{1.5-0.5}).
        const double w0 = 1.0 / (1.0 + std::exp(1.0));
        Tensor<double> m({3}, {1, 1, 0});
        auto y = masked_softmax(constant(Tensor<double>({3}, {0.5, 1.5, 7.0})), &m).value();
        CHECK(y[0] == doctest::Approx(0.268941).epsilon(1e-6));
        CHECK(y[1] == doctest::Approx(0.731059).epsilon(1e-6));
        CHECK(y[0] == doctest::Approx(w0).epsilon(1e-14));
        CHECK(y[2] <= 1e-12);
    }
    SUBCASE("all-masked row is an error, not NaN") {
        Tensor<double> m({2, 2}, {1, 0, 0, 0});
        CHECK_THROWS_AS(masked_softmax(constant(Tensor<double>({2, 2}, {1, 2, 3, 4})), &m), InvalidMaskError);
    }
}

TEST_CASE("masked_softmax rows: 200 random seeds") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        std::mt19937_64 rng(seed);
        const std::size_t B = 1 + rng() % 3, H = 1 + rng() % 3, T = 1 + rng() % 12;
        auto scores = random_tensor<float>({B, H, T}, rng, -20.0, 20.0);
        Tensor<float> mask({B, 1, T});
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t valid = 1 + rng() % T;
            for (std::size_t t = 0; t < T; ++t) mask.at({b, 0, t}) = (rng() % 3 == 0 && t != valid - 1) ? 0.0f : 1.0f;
        }
        auto y = masked_softmax(constant(scores), &mask, default_kappa<float>()).value();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h) {
                double total = 0;
                for (std::size_t t = 0; t < T; ++t) {
                    const float w = y.at({b, h, t});
                    total += w;
                    if (mask.at({b, 0, t}) == 0.0f) CHECK(w <= 1e-12f);
                }
                CHECK(std::abs(total - 1.0) <= 1e-6);
            }
    }
}

TEST_CASE("layer_norm") {
    auto ones = constant(Tensor<double>({4}, 1.0));
    auto zeros = constant(Tensor<double>({4}, 0.0));
    CHECK(layer_norm(constant(Tensor<double>({4}, 5.0)), ones, zeros, 1e-12).value() == Tensor<double>({4}));

    auto y = layer_norm(constant(Tensor<double>({2}, {-1, 1})), constant(Tensor<double>({2}, 1.0)),
                        constant(Tensor<double>({2}, 0.0)), 0.0)
                 .value();
    CHECK(y == Tensor<double>({2}, {-1, 1}));

    std::mt19937_64 rng(5);
    auto collapsed = layer_norm(constant(random_tensor<double>({3, 4}, rng)), zeros,
                                constant(Tensor<double>({4}, {0.5, -1, 2, 3})), 1e-12)
                         .value();
    for (std::size_t r = 0; r < 3; ++r) {
        CHECK(collapsed.at({r, 0}) == 0.5);
        CHECK(collapsed.at({r, 3}) == 3.0);
    }

    SUBCASE("normalized statistics on random inputs") {
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            std::mt19937_64 r(seed);
            const std::size_t D = 2 + r() % 64;
            auto x = random_tensor<double>({3, D}, r, -10.0, 10.0);
            auto out = layer_norm(constant(x), constant(Tensor<double>({D}, 1.0)), constant(Tensor<double>({D})),
                                  1e-12)
                           .value();
            for (std::size_t row = 0; row < 3; ++row) {
                double mu = 0, var = 0;
                for (std::size_t j = 0; j < D; ++j) mu += out.at({row, j});
                mu /= double(D);
                for (std::size_t j = 0; j < D; ++j) var += (out.at({row, j}) - mu) * (out.at({row, j}) - mu);
                var /= double(D);
                CHECK(std::abs(mu) <= 1e-6);
                CHECK(std::abs(var - 1.0) <= 1e-4);
            }
        }
    }
}

TEST_CASE("backward analytic derivatives") {
    std::mt19937_64 rng(21);
    ParamStore<double> ps;
    auto x = ps.add("x", random_tensor<double>({2, 3}, rng), true);
    auto grads = backward(sum(x * x), ps);
    for (std::size_t i = 0; i < 6; ++i) CHECK(grads.at("x")[i] == 2.0 * x.value()[i]);

    ParamStore<double> ps2;
    auto A = ps2.add("A", random_tensor<double>({2, 3}, rng), true);
    auto B = ps2.add("B", random_tensor<double>({3, 4}, rng), true);
    auto g2 = backward(sum(matmul(A, B)), ps2);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            double row_sum = 0;
            for (std::size_t j = 0; j < 4; ++j) row_sum += B.value().at({k, j});
            CHECK(g2.at("A").at({i, k}) == doctest::Approx(row_sum).epsilon(1e-14));
        }

    SUBCASE("unreached parameters map to zeros") {
        ParamStore<double> ps3;
        auto used = ps3.add("used", Tensor<double>({2}, 1.0), true);
        ps3.add("unused", Tensor<double>({3}, 1.0), true);
        auto g = backward(sum(used), ps3);
        CHECK(g.size() == 2);
        CHECK(g.at("unused") == Tensor<double>({3}));
    }
    SUBCASE("non-scalar loss is a contract error") {
        CHECK_THROWS_AS(backward(x * x), ContractError);
    }
}

TEST_CASE("finite_diff_check analytic cases") {
    ParamStore<double> ps;
    auto theta = ps.add("theta", Tensor<double>::scalar(3.0), true);
    auto report = finite_diff_check([&] { return theta * theta; }, ps, 1e-5);
    CHECK(std::abs(report.worst_numeric - 6.0) <= 1e-8);
    CHECK(report.max_rel_error < 1e-9);

    ParamStore<double> ps2;
    auto t2 = ps2.add("theta", Tensor<double>::scalar(0.0), true);
    auto r2 = finite_diff_check([&] { return softplus(t2); }, ps2, 1e-5);
    CHECK(r2.worst_numeric == doctest::Approx(0.5).epsilon(1e-9));

    CHECK_THROWS_AS(finite_diff_check([&] { return softplus(t2); }, ps2, 1e-2), ContractError);
}

TEST_CASE("composite graphs agree with finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        ParamStore<double> ps;
        auto x = ps.add("x", random_tensor<double>({2, 3, 4}, rng), true);
        auto w = ps.add("w", random_tensor<double>({4, 6}, rng), true);
        auto gamma = ps.add("gamma", random_tensor<double>({6}, rng, 0.5, 1.5), false);
        auto beta = ps.add("beta", random_tensor<double>({6}, rng), false);
        Tensor<double> mask({2, 1, 3}, {1, 1, 0, 1, 0, 0});
        std::vector<std::int32_t> ids{1, 0, 2, 3};
        auto table = ps.add("table", random_tensor<double>({4, 6}, rng), true);
        auto loss_fn = [&] {
            auto h = layer_norm(matmul(x, w), gamma, beta, 1e-12);
            auto g = gelu(h) + silu(h) * softplus(h) + sigmoid(h) - exp(scale(h, 0.1));
            auto scores = scale(matmul(g, transpose(g)), 0.1);
            auto att = masked_softmax(scores, &mask);
            auto ctx = matmul(att, slice_last(g, 1, 4));
            auto perm = permute(ctx, {1, 0, 2});
            auto rows = std::vector<std::size_t>{0, 3, 5};
            auto picked = gather_rows(reshape(perm, {6, 4}), rows);
            auto emb = embedding(table, ids, {2, 2});
            auto logits = matmul(picked, transpose(slice_last(reshape(emb, {4, 6}), 0, 4)));
            std::vector<std::int32_t> labels{2, kIgnoreLabel, 0};
            return cross_entropy(logits, labels) + mean(emb * emb);
        };
        auto report = finite_diff_check(loss_fn, ps, 1e-5);
        INFO("seed " << seed << " worst " << report.worst_param << "[" << report.worst_index << "] analytic " << report.worst_analytic << " numeric " << report.worst_numeric);
        CHECK(report.max_rel_error <= 1e-4);
    }
}

TEST_CASE("operations are pure") {
    std::mt19937_64 rng(8);
    auto a = random_tensor<float>({3, 7}, rng);
    auto b = random_tensor<float>({7, 5}, rng);
    auto r1 = softplus(matmul(constant(a), constant(b))).value();
    auto r2 = softplus(matmul(constant(a), constant(b))).value();
    CHECK(r1 == r2);
}

TEST_CASE("no-grad mode records no graph") {
    ParamStore<double> ps;
    auto w = ps.add("w", Tensor<double>({2}, 1.0), true);
    NoGradGuard guard;
    auto y = sum(w * w);
    CHECK_FALSE(y.requires_grad());
}
