#include <doctest.h>

#include <cmath>
#include <random>

#include "mabert/gradcheck.hpp"
#include "mabert/heads.hpp"
#include "test_util.hpp"

using namespace mabert;
using namespace mabert::testing;

namespace {

EncoderConfig tiny_config(const std::string& pattern) {
    EncoderConfig c;
    c.D = 16;
    c.depth = pattern.size();
    c.pattern = pattern;
    c.n_heads = 2;
    c.D_ff = 32;
    c.N = 4;
    c.V = 40;
    c.T_max = 32;
    c.dropout = 0.0;
    c.dtype = "f64";
    return c;
}

// Hidden states [1, T, 1] with the given scalar per token.
Var<double> column(const std::vector<double>& xs) {
    Tensor<double> t(Shape{1, xs.size(), 1});
    for (std::size_t i = 0; i < xs.size(); ++i) t[i] = xs[i];
    return constant(std::move(t));
}

MAPParams<double> unit_scorer(std::size_t D, double w = 1.0) {
    return {constant(Tensor<double>(Shape{D, 1}, w))};
}

}  // namespace

TEST_CASE("parse_pattern") {
    const LayerPattern p = parse_pattern("MMTMMTMMTMMT", 12);
    REQUIRE(p.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) {
        CHECK(p.layers[i] == (i % 3 == 2 ? LayerKind::Transformer : LayerKind::Mamba));
    }
    CHECK(p.str() == "MMTMMTMMTMMT");
    const LayerPattern t = parse_pattern("TTTTTTTTTTTT");
    for (auto k : t.layers) CHECK(k == LayerKind::Transformer);

    try {
        parse_pattern("MXT");
        FAIL("expected PatternError");
    } catch (const PatternError& e) {
        CHECK(std::string(e.what()).find("index 1") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_pattern(""), PatternError);
    CHECK_THROWS_AS(parse_pattern("mmt"), PatternError);
    CHECK_THROWS_AS(parse_pattern("MMT", 4), PatternError);

    const auto& refs = reference_patterns();
    CHECK(refs.size() == 8);
    for (const auto& s : refs) CHECK_NOTHROW(parse_pattern(s, 12));
}

TEST_CASE("EncoderConfig validation and JSON") {
    EncoderConfig c = tiny_config("MMT");
    CHECK_NOTHROW(c.validate());

    EncoderConfig back = EncoderConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());

    nlohmann::json partial = {{"D", 32}, {"n_heads", 4}};
    EncoderConfig merged = EncoderConfig::from_json(partial, c);
    CHECK(merged.D == 32);
    CHECK(merged.pattern == "MMT");

    CHECK_THROWS_AS(EncoderConfig::from_json({{"hidden", 8}}), ConfigError);

    EncoderConfig bad = c;
    bad.n_heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.depth = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.depth = 0;
    bad.pattern = "";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.psm_mode = "both";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parameter_count matches the registered parameters") {
    for (const std::string pattern : {"M", "T", "MMT", "TMTM"}) {
        for (bool positions : {true, false}) {
            for (bool tied : {false, true}) {
                for (std::size_t classes : {0u, 3u}) {
                    for (bool final_ln : {true, false}) {
                        EncoderConfig c = tiny_config(pattern);
                        c.positions = positions;
                        c.tie_mlm_decoder = tied;
                        c.num_classes = classes;
                        c.final_ln = final_ln;
                        Model<float> m(c, 3);
                        CAPTURE(pattern);
                        CAPTURE(positions);
                        CAPTURE(tied);
                        CAPTURE(classes);
                        CHECK(parameter_count(c) == m.params.scalar_count());
                    }
                }
            }
        }
    }
    // Default desk-scale configuration, counted by hand per block family.
    EncoderConfig d;
    const std::size_t D = 64, F = 256, Dm = 128, N = 16, r = 8, k = 4, V = 1024, Tm = 512;
    const std::size_t ffn = 2 * D * F + F + D;
    const std::size_t tf = 4 * D + 4 * D * D + 4 * D + ffn;
    const std::size_t ssm = 4 * D + 2 * D * Dm + Dm * k + Dm + Dm * (r + 2 * N) + r * Dm + Dm + Dm * N + Dm +
                            Dm * D + ffn;
    const std::size_t expected = V * D + Tm * D + 2 * D + 8 * ssm + 4 * tf + 2 * D + D * D + D + 2 * D + D * V + V;
    CHECK(parameter_count(d) == expected);
}

TEST_CASE("Model parameters follow the pattern") {
    Model<double> m(tiny_config("MTM"), 1);
    REQUIRE(m.encoder.layers.size() == 3);
    CHECK(m.encoder.layers[0].kind == LayerKind::Mamba);
    CHECK(m.encoder.layers[1].kind == LayerKind::Transformer);
    CHECK(m.params.contains("layers.0.ssm.W_in"));
    CHECK(m.params.contains("layers.1.attn.q.W"));
    CHECK_FALSE(m.params.contains("layers.1.ssm.W_in"));

    Model<double> same(tiny_config("MTM"), 1);
    Model<double> other(tiny_config("MTM"), 2);
    bool identical = true, differs = false;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        identical = identical && m.params.entries()[i].var.value() == same.params.entries()[i].var.value();
        differs = differs || m.params.entries()[i].var.value() != other.params.entries()[i].var.value();
    }
    CHECK(identical);
    CHECK(differs);
}

TEST_CASE("transformer block") {
    std::mt19937_64 rng(4);
    EncoderConfig c = tiny_config("T");
    Model<double> m(c, 5);
    auto p = m.encoder.layers[0].tf;
    Tensor<double> H = random_tensor<double>({2, 5, c.D}, rng);
    const Tensor<double> mask = prefix_mask<double>({5, 3}, 5);

    SUBCASE("zero attention and FFN weights give the identity") {
        for (auto* lin : {&p.attn.q, &p.attn.k, &p.attn.v, &p.attn.o, &p.ffn.up, &p.ffn.down}) {
            lin->W = constant(Tensor<double>(lin->W.shape()));
            lin->b = constant(Tensor<double>(lin->b.shape()));
        }
        auto y = transformer_block_forward(constant(H), mask, p, c).value();
        CHECK(y == H);
    }
    SUBCASE("valid positions ignore truncated pads") {
        auto full = transformer_block_forward(constant(H), mask, p, c).value();
        Tensor<double> H1(Shape{1, 3, c.D});
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t d = 0; d < c.D; ++d) H1.at({0, t, d}) = H.at({1, t, d});
        auto short_run = transformer_block_forward(constant(H1), Tensor<double>::ones({1, 3}), p, c).value();
        double worst = 0;
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t d = 0; d < c.D; ++d) worst = std::max(worst, std::abs(full.at({1, t, d}) - short_run.at({0, t, d})));
        CHECK(worst <= 1e-12);
    }
}

TEST_CASE("encoder_forward composition") {
    EncoderConfig c = tiny_config("T");
    Model<double> m(c, 6);
    BatchEncoding b = make_batch({{7, 8, 9}, {10, 11}});
    const Tensor<double> mask = b.mask_tensor<double>();
    auto H = encoder_forward(b, m).value();

    EmbeddingOptions eo{c.positions, c.ln_eps, 0.0};
    auto E = embed_forward(std::span<const std::int32_t>(b.ids), b.B, b.T, m.encoder.embed, eo, ForwardContext{});
    auto y = transformer_block_forward(E, mask, m.encoder.layers[0].tf, c);
    auto ref = layer_norm(y, m.encoder.final_ln, c.ln_eps).value();
    CHECK(H == ref);
}

TEST_CASE("full-stack padding invariance with pre+post masking") {
    for (const std::string pattern : {"MMT", "TMM", "MTMT"}) {
        for (const std::string dir : {"forward", "reverse", "bidirectional"}) {
            for (const std::string pad : {"causal", "same"}) {
                EncoderConfig c = tiny_config(pattern);
                c.scan_direction = dir;
                c.conv_padding = pad;
                c.init = "fan_in";
                Model<double> m(c, 8);
                const std::vector<std::int32_t> seq = {12, 5, 33, 20, 7};
                auto ref = encoder_forward(make_batch({seq}), m).value();
                auto padded = encoder_forward(make_batch({seq}, 9), m).value();
                bool same = true;
                for (std::size_t i = 0; i < ref.numel(); ++i) same = same && ref[i] == padded[i];
                CAPTURE(pattern);
                CAPTURE(dir);
                CAPTURE(pad);
                CHECK(same);
            }
        }
    }
}

TEST_CASE("padding changes valid states without masking") {
    EncoderConfig c = tiny_config("MMT");
    c.init = "fan_in";
    c.conv_padding = "same";
    c.psm_mode = "none";
    Model<double> m(c, 8);
    const std::vector<std::int32_t> seq = {12, 5, 33, 20, 7};
    auto ref = encoder_forward(make_batch({seq}), m).value();
    auto padded = encoder_forward(make_batch({seq}, 9), m).value();
    double worst = 0;
    for (std::size_t i = 0; i < ref.numel(); ++i) worst = std::max(worst, std::abs(ref[i] - padded[i]));
    CHECK(worst > 1e-6);
}

TEST_CASE("encoder rejects interior padding and bad ids") {
    Model<double> m(tiny_config("MT"), 1);
    BatchEncoding b = make_batch({{7, 8, 9}});
    b.mask[1] = 0;
    CHECK_THROWS_AS(encoder_forward(b, m), InvalidMaskError);
    BatchEncoding v = make_batch({{7, 99}});
    CHECK_THROWS_AS(encoder_forward(v, m), VocabularyError);
}

TEST_CASE("MAP weights") {
    SUBCASE("single valid token takes all the weight") {
        auto H = column({0.3, -2.0, 5.0});
        const Tensor<double> mask = prefix_mask<double>({1}, 3);
        auto pooled = map_pool(H, mask, unit_scorer(1)).value();
        CHECK(pooled[0] == 0.3);
    }
    SUBCASE("uniform scores average the valid tokens") {
        Tensor<double> h(Shape{1, 4, 2});
        for (std::size_t i = 0; i < 8; ++i) h[i] = double(i + 1);
        const Tensor<double> mask = prefix_mask<double>({3}, 4);
        MAPParams<double> zero{constant(Tensor<double>(Shape{2, 1}))};
        auto w = map_weights(constant(h), &mask, zero).value();
        for (std::size_t t = 0; t < 3; ++t) CHECK(w[t] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
        CHECK(w[3] <= 1e-12);
        auto pooled = map_pool(constant(h), mask, zero).value();
        CHECK(pooled[0] == doctest::Approx((1.0 + 3.0 + 5.0) / 3.0).epsilon(1e-14));
        CHECK(pooled[1] == doctest::Approx((2.0 + 4.0 + 6.0) / 3.0).epsilon(1e-14));
    }
    SUBCASE("hand-set scores") {
        auto H = column({0.5, 1.5, 100.0});
        const Tensor<double> mask = prefix_mask<double>({2}, 3);
        auto w = map_weights(H, &mask, unit_scorer(1)).value();
        const double hi = 1.0 / (1.0 + std::exp(-1.0));
        CHECK(std::abs(w[0] - (1.0 - hi)) <= 1e-12);
        CHECK(std::abs(w[1] - hi) <= 1e-12);
        CHECK(w[2] <= 1e-12);
        CHECK(std::abs(w[0] - 0.268941) <= 1e-6);
        CHECK(std::abs(w[1] - 0.731059) <= 1e-6);
    }
    SUBCASE("pad weights vanish and valid weights sum to one") {
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            std::mt19937_64 rng(seed);
            const std::size_t T_len = 2 + seed % 12, L = 1 + seed % (T_len - 1);
            Tensor<float> h = random_tensor<float>({1, T_len, 8}, rng, -4.0, 4.0);
            MAPParams<float> p{constant(random_tensor<float>({8, 1}, rng, -3.0, 3.0))};
            const Tensor<float> mask = prefix_mask<float>({L}, T_len);
            auto w = map_weights(constant(h), &mask, p).value();
            double total = 0, pad = 0, lowest = 1;
            for (std::size_t t = 0; t < T_len; ++t) {
                (t < L ? total : pad) += w[t];
                lowest = std::min(lowest, double(w[t]));
            }
            CAPTURE(seed);
            CHECK(pad <= 1e-12);
            CHECK(std::abs(total - 1.0) <= 1e-6);
            CHECK(lowest >= 0.0);
        }
    }
    SUBCASE("a row with no valid token is rejected") {
        auto H = column({1.0, 2.0});
        CHECK_THROWS_AS(map_pool(H, Tensor<double>(Shape{1, 2}), unit_scorer(1)), InvalidMaskError);
    }
}

TEST_CASE("pooling modes") {
    std::mt19937_64 rng(12);
    Tensor<double> h = random_tensor<double>({2, 5, 4}, rng);
    MAPParams<double> p{constant(random_tensor<double>({4, 1}, rng))};

    SUBCASE("MAP equals ATTN under a full mask") {
        const Tensor<double> full = Tensor<double>::ones({2, 5});
        auto a = pool(constant(h), full, PoolingMode::MAP, p).value();
        auto b = pool(constant(h), full, PoolingMode::ATTN, p).value();
        CHECK(a == b);
        Tensor<float> hf = random_tensor<float>({3, 7, 4}, rng);
        MAPParams<float> pf{constant(random_tensor<float>({4, 1}, rng))};
        const Tensor<float> ff = Tensor<float>::ones({3, 7});
        CHECK(pool(constant(hf), ff, PoolingMode::MAP, pf).value() ==
              pool(constant(hf), ff, PoolingMode::ATTN, pf).value());
    }
    SUBCASE("ATTN gives pads weight") {
        const Tensor<double> mask = prefix_mask<double>({5, 2}, 5);
        auto w = map_weights<double>(constant(h), nullptr, p).value();
        double pad = 0;
        for (std::size_t t = 2; t < 5; ++t) pad += w[5 + t];
        CHECK(pad > 1e-3);
        auto a = pool(constant(h), mask, PoolingMode::MAP, p).value();
        auto b = pool(constant(h), mask, PoolingMode::ATTN, p).value();
        CHECK(a != b);
    }
    SUBCASE("CLS takes the first token") {
        auto c = pool(constant(h), prefix_mask<double>({5, 2}, 5), PoolingMode::CLS, p).value();
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t d = 0; d < 4; ++d) CHECK(c.at({b, d}) == h.at({b, 0, d}));
    }
    SUBCASE("masked mean") {
        auto c = pool(constant(h), prefix_mask<double>({1, 3}, 5), PoolingMode::MaskedMean, p).value();
        for (std::size_t d = 0; d < 4; ++d) {
            CHECK(c.at({0, d}) == h.at({0, 0, d}));
            const double ref = (h.at({1, 0, d}) + h.at({1, 1, d}) + h.at({1, 2, d})) / 3.0;
            CHECK(std::abs(c.at({1, d}) - ref) <= 1e-15);
        }
        CHECK_THROWS_AS(pool(constant(h), prefix_mask<double>({2, 0}, 5), PoolingMode::MaskedMean, p),
                        InvalidMaskError);
        CHECK_NOTHROW(pool(constant(h), prefix_mask<double>({2, 0}, 5), PoolingMode::CLS, p));
    }
    SUBCASE("names round-trip") {
        for (auto m : {PoolingMode::MAP, PoolingMode::ATTN, PoolingMode::CLS, PoolingMode::MaskedMean})
            CHECK(parse_pooling(pooling_name(m)) == m);
        CHECK_THROWS_AS(parse_pooling("max"), ConfigError);
    }
}

TEST_CASE("classify") {
    HeadParams<double> p;
    p.W_c = constant(Tensor<double>(Shape{2, 2}, std::vector<double>{1.0, 2.0, -1.0, 0.5}));
    p.b_c = constant(Tensor<double>(Shape{2}, std::vector<double>{0.1, -0.2}));
    Tensor<double> x(Shape{1, 2}, std::vector<double>{3.0, -4.0});

    auto y = classify(constant(x), p, 0.1).value();
    CHECK(y[0] == doctest::Approx(1.0 * 3.0 + 2.0 * -4.0 + 0.1).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(-1.0 * 3.0 + 0.5 * -4.0 - 0.2).epsilon(1e-15));
    CHECK(classify(constant(x), p, 0.1).value() == y);

    Tensor<double> x3 = x;
    for (auto& v : x3.values()) v *= 3.0;
    auto y3 = classify(constant(x3), p, 0.1).value();
    for (std::size_t c = 0; c < 2; ++c)
        CHECK(std::abs((y3[c] - p.b_c.value()[c]) - 3.0 * (y[c] - p.b_c.value()[c])) <= 1e-13);

    HeadParams<double> zero{constant(Tensor<double>(Shape{2, 2})), p.b_c};
    auto z = classify(constant(x), zero, 0.0).value();
    CHECK(z[0] == 0.1);
    CHECK(z[1] == -0.2);

    ForwardContext train{true, 3, 1};
    Tensor<double> wide(Shape{1, 2}, 1.0);
    HeadParams<double> id{constant(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 0, 0, 1})),
                          constant(Tensor<double>(Shape{2}))};
    auto dropped = classify(constant(wide), id, 0.5, train).value();
    for (double v : dropped.values()) CHECK((v == 0.0 || v == 2.0));
}

TEST_CASE("MLM head") {
    EncoderConfig c = tiny_config("M");
    std::mt19937_64 rng(13);

    SUBCASE("zero parameters except the decoder bias") {
        Model<double> m(c, 2);
        for (auto& e : m.params.entries()) {
            if (e.name.rfind("mlm.", 0) == 0) e.var.mutable_value().fill(0.0);
        }
        for (std::size_t v = 0; v < c.V; ++v) m.mlm.decoder.b.mutable_value()[v] = 0.01 * double(v);
        auto logits = mlm_logits(constant(random_tensor<double>({2, 3, c.D}, rng)), m).value();
        REQUIRE(logits.shape() == Shape{2, 3, c.V});
        for (std::size_t row = 0; row < 6; ++row)
            for (std::size_t v = 0; v < c.V; ++v) CHECK(logits[row * c.V + v] == 0.01 * double(v));
    }
    SUBCASE("position-wise and row selection") {
        Model<double> m(c, 2);
        Tensor<double> h = random_tensor<double>({1, 4, c.D}, rng);
        Tensor<double> flipped(h.shape());
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t d = 0; d < c.D; ++d) flipped.at({0, t, d}) = h.at({0, 3 - t, d});
        auto a = mlm_logits(constant(h), m).value();
        auto b = mlm_logits(constant(flipped), m).value();
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t v = 0; v < c.V; ++v) CHECK(a.at({0, t, v}) == b.at({0, 3 - t, v}));
        const std::vector<std::size_t> rows = {2, 0};
        auto sel = mlm_logits_at(constant(h), std::span<const std::size_t>(rows), m).value();
        for (std::size_t v = 0; v < c.V; ++v) {
            CHECK(sel.at({0, v}) == a.at({0, 2, v}));
            CHECK(sel.at({1, v}) == a.at({0, 0, v}));
        }
    }
    SUBCASE("tied decoder reads the token table") {
        EncoderConfig t = c;
        t.tie_mlm_decoder = true;
        Model<double> m(t, 2);
        CHECK_FALSE(m.params.contains("mlm.decoder.W"));
        CHECK(mlm_logits(constant(random_tensor<double>({1, 2, c.D}, rng)), m).shape() == Shape{1, 2, c.V});
    }
    SUBCASE("gradients through the head") {
        Model<double> m(c, 2);
        ParamStore<double> ps;
        auto reg = [&](const std::string& name, Var<double>& v) { v = ps.add(name, v.value(), true); };
        reg("transform.W", m.mlm.transform.W);
        reg("transform.b", m.mlm.transform.b);
        reg("ln.g", m.mlm.ln.gamma);
        reg("ln.b", m.mlm.ln.beta);
        reg("decoder.W", m.mlm.decoder.W);
        reg("decoder.b", m.mlm.decoder.b);
        Var<double> h = ps.add("h", random_tensor<double>({1, 3, c.D}, rng), false);
        Tensor<double> w = random_tensor<double>({1, 3, c.V}, rng);
        auto loss = [&] { return sum(mul(mlm_logits(h, m), constant(w))); };
        const auto report = finite_diff_check(loss, ps, 1e-5);
        CAPTURE(report.worst_param);
        CAPTURE(report.worst_analytic);
        CAPTURE(report.worst_numeric);
        CHECK(report.max_rel_error <= 1e-5);
    }
}

TEST_CASE("all reference patterns run forward and backward") {
    for (const auto& pattern : reference_patterns()) {
        EncoderConfig c = tiny_config(pattern);
        Model<float> m(c, 1);
        BatchEncoding b = make_batch({{6, 7, 8, 9}, {10, 11}});
        auto H = encoder_forward(b, m);
        CHECK(H.shape() == Shape{2, 6, c.D});
        auto g = backward(sum(mlm_logits(H, m)), m.params);
        bool finite = true;
        for (const auto& [name, t] : g)
            for (float v : t.values()) finite = finite && std::isfinite(v);
        CAPTURE(pattern);
        CHECK(finite);
    }
}
