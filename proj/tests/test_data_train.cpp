#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "mabert/train.hpp"
#include "test_util.hpp"

using namespace mabert;
using namespace mabert::testing;

namespace {

EncoderConfig small_config(const std::string& pattern = "MT", std::size_t V = 48) {
    EncoderConfig c;
    c.D = 16;
    c.depth = pattern.size();
    c.pattern = pattern;
    c.n_heads = 2;
    c.D_ff = 32;
    c.N = 4;
    c.V = V;
    c.T_max = 64;
    return c;
}

TrainConfig short_run(std::size_t steps, std::uint64_t seed = 1) {
    TrainConfig t;
    t.total_steps = steps;
    t.batch_size = 4;
    t.peak_lr = 1e-3;
    t.seed = seed;
    return t;
}

std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("mabert_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string as_string(const std::vector<char>& v) { return std::string(v.begin(), v.end()); }

}  // namespace

TEST_CASE("Vocabulary") {
    Vocabulary v;
    CHECK(v.size() == std::size_t(kNumReserved));
    CHECK(v.id("[PAD]") == kPad);
    CHECK(v.id("[CLS]") == kCls);
    CHECK(v.id("[SEP]") == kSep);
    CHECK(v.id("[MASK]") == kMask);
    CHECK(v.id("[UNK]") == kUnk);

    Vocabulary built = Vocabulary::build({"b a a", "c a b", "d"}, 8);
    CHECK(built.size() == 8);
    CHECK(built.id("a") == 5);
    CHECK(built.id("b") == 6);
    CHECK(built.id("c") == 7);
    CHECK(built.id("d") == kUnk);
    CHECK(built.encode("a  zz\tc") == std::vector<std::int32_t>{5, kUnk, 7});
    CHECK(built.word(6) == "b");

    Vocabulary syn = Vocabulary::synthetic(10);
    CHECK(syn.size() == 10);
    CHECK(syn.word(9) == "w9");
}

TEST_CASE("synthetic corpora") {
    CorpusSpec spec;
    spec.V = 64;
    spec.count = 2000;
    spec.seed = 5;

    SUBCASE("copy grammar repeats at the offset") {
        for (std::size_t offset : {1u, 2u, 3u}) {
            spec.offset = offset;
            const Corpus c = synthetic_corpus(spec);
            REQUIRE(c.size() == spec.count);
            for (const auto& s : c) {
                for (std::size_t t = offset; t < s.size(); ++t) REQUIRE(s[t] == s[t - offset]);
                for (auto id : s) {
                    REQUIRE(id >= kNumReserved);
                    REQUIRE(id < std::int32_t(spec.V));
                }
            }
        }
    }
    SUBCASE("lengths are uniform on the range") {
        spec.count = 20000;
        spec.min_len = 8;
        spec.max_len = 32;
        const Corpus c = synthetic_corpus(spec);
        std::map<std::size_t, std::size_t> hist;
        for (const auto& s : c) {
            REQUIRE(s.size() >= 8);
            REQUIRE(s.size() <= 32);
            ++hist[s.size()];
        }
        CHECK(hist.size() == 25);
        const double expected = 20000.0 / 25.0, sd = std::sqrt(expected * (1.0 - 1.0 / 25.0));
        for (const auto& [len, n] : hist) {
            CAPTURE(len);
            CHECK(std::abs(double(n) - expected) <= 5.0 * sd);
        }
    }
    SUBCASE("bigram chain and determinism") {
        spec.kind = "bigram";
        const Corpus a = synthetic_corpus(spec), b = synthetic_corpus(spec);
        CHECK(a == b);
        spec.seed = 6;
        CHECK(synthetic_corpus(spec) != a);
        std::size_t repeats = 0, pairs = 0;
        for (const auto& s : a) {
            for (std::size_t t = 2; t < s.size(); ++t, ++pairs) repeats += s[t] == s[t - 2];
        }
        CHECK(double(repeats) / double(pairs) < 0.5);
    }
    SUBCASE("bad specs") {
        spec.V = 16;
        CHECK_THROWS_AS(synthetic_corpus(spec), ConfigError);
        spec.V = 64;
        spec.kind = "zipf";
        CHECK_THROWS_AS(synthetic_corpus(spec), ConfigError);
    }
}

TEST_CASE("corpus files") {
    const auto dir = scratch_dir("corpus");
    const Corpus c = {{5, 6, 7}, {8}, {9, 10}};
    write_corpus((dir / "ids.txt").string(), c);
    CHECK(read_corpus((dir / "ids.txt").string(), Vocabulary()) == c);

    {
        std::ofstream out(dir / "words.txt");
        out << "the cat sat\n\nthe dog\n";
    }
    Vocabulary v = Vocabulary::build({"the cat sat", "the dog"}, 8);
    const Corpus words = read_corpus((dir / "words.txt").string(), v);
    REQUIRE(words.size() == 2);
    CHECK(words[0] == v.encode("the cat sat"));
    CHECK_THROWS(read_corpus((dir / "missing.txt").string(), v));
    std::filesystem::remove_all(dir);
}

TEST_CASE("mlm_mask_batch") {
    std::vector<std::vector<std::int32_t>> seqs;
    for (int i = 0; i < 8; ++i) seqs.push_back(std::vector<std::int32_t>(5 + i, 10 + i));

    SUBCASE("p = 0 leaves the batch alone") {
        BatchEncoding b = make_batch(seqs);
        const auto before = b.ids;
        std::mt19937_64 rng(1);
        MaskingConfig cfg;
        cfg.probability = 0.0;
        const MaskingStats s = mlm_mask_batch(b, rng, 64, cfg);
        CHECK(b.ids == before);
        CHECK(s.selected == 0);
        for (auto l : b.labels) CHECK(l == -1);
    }
    SUBCASE("p = 1 with an all-mask split") {
        BatchEncoding b = make_batch(seqs);
        const auto before = b.ids;
        std::mt19937_64 rng(2);
        MaskingConfig cfg{1.0, 1.0, 0.0, 0.0};
        const MaskingStats s = mlm_mask_batch(b, rng, 64, cfg);
        for (std::size_t i = 0; i < b.ids.size(); ++i) {
            const bool eligible = b.mask[i] && before[i] != kCls && before[i] != kSep;
            CHECK(b.ids[i] == (eligible ? kMask : before[i]));
            CHECK(b.labels[i] == (eligible ? before[i] : -1));
        }
        CHECK(s.selected == s.eligible);
        CHECK(s.eligible == std::size_t(5 + 6 + 7 + 8 + 9 + 10 + 11 + 12));
    }
    SUBCASE("Monte-Carlo rates over a million eligible tokens") {
        const std::size_t V = 1000;
        std::mt19937_64 rng(3);
        std::mt19937_64 draw(4);
        std::uniform_int_distribution<std::int32_t> id(kNumReserved, std::int32_t(V) - 1);
        MaskingStats total;
        std::size_t random_in_range = 0, random_changed = 0;
        while (total.eligible < 1000000) {
            std::vector<std::vector<std::int32_t>> batch(16);
            for (auto& s : batch) {
                s.resize(40 + draw() % 24);
                for (auto& t : s) t = id(draw);
            }
            BatchEncoding b = make_batch(batch);
            const auto before = b.ids;
            const MaskingStats s = mlm_mask_batch(b, rng, V, MaskingConfig{});
            total.eligible += s.eligible;
            total.selected += s.selected;
            total.to_mask += s.to_mask;
            total.to_random += s.to_random;
            total.kept += s.kept;
            std::size_t masked = 0, labeled = 0;
            for (std::size_t i = 0; i < b.ids.size(); ++i) {
                if (b.labels[i] < 0) {
                    REQUIRE(b.ids[i] == before[i]);
                    continue;
                }
                ++labeled;
                REQUIRE(b.labels[i] == before[i]);
                masked += b.ids[i] == kMask;
                if (b.ids[i] != kMask && b.ids[i] != before[i]) {
                    ++random_changed;
                    random_in_range += b.ids[i] >= kNumReserved && b.ids[i] < std::int32_t(V);
                }
            }
            REQUIRE(labeled == s.selected);
            REQUIRE(masked == s.to_mask);
        }
        const double sel = double(total.selected) / double(total.eligible);
        const double n = double(total.selected);
        CAPTURE(sel);
        CHECK(std::abs(sel - 0.15) <= 0.002);
        CHECK(std::abs(double(total.to_mask) / n - 0.8) <= 0.005);
        CHECK(std::abs(double(total.to_random) / n - 0.1) <= 0.005);
        CHECK(std::abs(double(total.kept) / n - 0.1) <= 0.005);
        CHECK(random_in_range == random_changed);
        CHECK(total.to_mask + total.to_random + total.kept == total.selected);
    }
    SUBCASE("pads and specials are never selected") {
        BatchEncoding b = make_batch(seqs, 6);
        std::mt19937_64 rng(5);
        mlm_mask_batch(b, rng, 64, MaskingConfig{1.0, 0.0, 1.0, 0.0});
        for (std::size_t i = 0; i < b.ids.size(); ++i) {
            if (!b.mask[i]) CHECK(b.ids[i] == kPad);
            if (b.ids[i] == kCls || b.ids[i] == kSep || b.ids[i] == kPad) CHECK(b.labels[i] == -1);
        }
    }
}

TEST_CASE("mlm_loss") {
    SUBCASE("uniform logits give ln V") {
        Tensor<double> logits(Shape{2, 3, 50}, 0.7);
        std::vector<std::int32_t> labels = {5, -1, 9, -1, -1, 49};
        CHECK(mlm_loss(constant(logits), labels).value().item() == doctest::Approx(std::log(50.0)).epsilon(1e-14));
    }
    SUBCASE("confident correct logits give a loss near zero") {
        Tensor<double> logits(Shape{1, 2, 4});
        logits.at({0, 0, 2}) = 60.0;
        logits.at({0, 1, 1}) = 60.0;
        std::vector<std::int32_t> labels = {2, 1};
        CHECK(mlm_loss(constant(logits), labels).value().item() < 1e-20);
    }
    SUBCASE("hand two-class case") {
        Tensor<double> logits(Shape{1, 1, 2}, {1.0, 3.0});
        std::vector<std::int32_t> labels = {0};
        const double ref = std::log(1.0 + std::exp(2.0));
        CHECK(mlm_loss(constant(logits), labels).value().item() == doctest::Approx(ref).epsilon(1e-14));
    }
    SUBCASE("no labels is a degenerate batch") {
        Tensor<double> logits(Shape{1, 2, 4});
        std::vector<std::int32_t> labels = {-1, -1};
        CHECK_THROWS_AS(mlm_loss(constant(logits), labels), TrainingError);
    }
}

TEST_CASE("learning rate schedule") {
    TrainConfig c;
    c.peak_lr = 1e-3;
    c.total_steps = 100;
    CHECK(c.warmup_steps() == 5);
    CHECK(learning_rate(1, c) == doctest::Approx(2e-4));
    CHECK(learning_rate(5, c) == doctest::Approx(1e-3));
    CHECK(learning_rate(6, c) == doctest::Approx(1e-3 * 94.0 / 95.0));
    CHECK(learning_rate(50, c) == doctest::Approx(1e-3 * 50.0 / 95.0));
    CHECK(learning_rate(100, c) == 0.0);
    c.warmup = 10;
    CHECK(learning_rate(10, c) == doctest::Approx(1e-3));
    CHECK(learning_rate(55, c) == doctest::Approx(0.5e-3));
    c.warmup = 100;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("TrainConfig JSON") {
    TrainConfig c;
    c.peak_lr = 5e-4;
    c.masking.probability = 0.2;
    const TrainConfig back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rate", 1.0}}), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"mask_fraction", 0.5}}), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"mlm_probability", 1.5}}), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"batch_size", 0}}), ConfigError);
    CHECK(TrainConfig::from_json({{"mask_fraction", 0.7}, {"random_fraction", 0.2}}).masking.mask_fraction == 0.7);
}

TEST_CASE("Adam") {
    TrainConfig cfg;
    auto single = [](double value, bool decay) {
        ParamStore<double> ps;
        ps.add("p", Tensor<double>(Shape{1}, value), decay);
        return ps;
    };
    auto grad = [](double g) {
        Gradients<double> gr;
        gr.emplace("p", Tensor<double>(Shape{1}, g));
        return gr;
    };

    SUBCASE("zero gradient without decay leaves parameters unchanged") {
        cfg.weight_decay = 0.0;
        auto ps = single(0.37, true);
        AdamState<double> st;
        adam_update(ps, grad(0.0), st, 1, 0.1, cfg);
        CHECK(ps.get("p").value()[0] == 0.37);
    }
    SUBCASE("zero gradient with decay scales by 1 - lr wd") {
        auto ps = single(2.0, true);
        AdamState<double> st;
        adam_update(ps, grad(0.0), st, 1, 0.1, cfg);
        CHECK(ps.get("p").value()[0] == doctest::Approx(2.0 * 0.999).epsilon(1e-15));
        auto exempt = single(2.0, false);
        AdamState<double> st2;
        adam_update(exempt, grad(0.0), st2, 1, 0.1, cfg);
        CHECK(exempt.get("p").value()[0] == 2.0);
    }
    SUBCASE("three steps against the unrolled recurrence") {
        const double lr = 0.05, wd = cfg.weight_decay, b1 = cfg.beta1, b2 = cfg.beta2, eps = cfg.eps;
        for (const std::vector<double> gs : {std::vector<double>{1.0, 1.0, 1.0}, std::vector<double>{0.3, -2.0, 0.7}}) {
            auto ps = single(0.8, true);
            AdamState<double> st;
            double p = 0.8, m = 0.0, v = 0.0;
            for (std::size_t t = 1; t <= 3; ++t) {
                const double g = gs[t - 1];
                adam_update(ps, grad(g), st, t, lr, cfg);
                m = b1 * m + (1 - b1) * g;
                v = b2 * v + (1 - b2) * g * g;
                const double mhat = m / (1 - std::pow(b1, double(t)));
                const double vhat = v / (1 - std::pow(b2, double(t)));
                p = p * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
                CAPTURE(t);
                CHECK(std::abs(ps.get("p").value()[0] - p) <= 1e-14);
            }
        }
    }
    SUBCASE("step index is 1-based") {
        auto ps = single(1.0, true);
        AdamState<double> st;
        CHECK_THROWS_AS(adam_update(ps, grad(1.0), st, 0, 0.1, cfg), ContractError);
    }
}

TEST_CASE("initial loss is near ln V") {
    CorpusSpec spec;
    spec.V = 256;
    spec.count = 64;
    spec.seed = 2;
    const Corpus corpus = synthetic_corpus(spec);
    EncoderConfig c = small_config("MMT", 256);
    c.dropout = 0.0;
    TrainConfig t = short_run(1);
    t.batch_size = 16;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Model<float> m(c, seed);
        const BatchEncoding b = mlm_batch(corpus, 1, c.V, t);
        auto logits = mlm_logits(encoder_forward(b, m), m);
        const double loss = mlm_loss(logits, std::span<const std::int32_t>(b.labels)).value().item();
        CAPTURE(seed);
        CHECK(loss >= 0.95 * std::log(256.0));
        CHECK(loss <= 1.05 * std::log(256.0));
    }
}

TEST_CASE("mlm_batch") {
    CorpusSpec spec;
    spec.V = 64;
    spec.count = 50;
    const Corpus corpus = synthetic_corpus(spec);
    TrainConfig t = short_run(10);
    t.max_len = 6;
    const BatchEncoding a = mlm_batch(corpus, 3, 64, t), b = mlm_batch(corpus, 3, 64, t);
    CHECK(a.ids == b.ids);
    CHECK(a.labels == b.labels);
    CHECK(a.B == 4);
    CHECK(a.T <= 8);
    std::size_t labeled = 0;
    for (auto l : a.labels) labeled += l >= 0;
    CHECK(labeled > 0);
    CHECK(mlm_batch(corpus, 4, 64, t).ids != a.ids);

    t.long_phase_fraction = 0.5;
    t.long_max_len = 20;
    CHECK(mlm_batch(corpus, 2, 64, t).T <= 8);
    CHECK(mlm_batch(corpus, 9, 64, t).T > 8);
}

TEST_CASE("train_loop") {
    CorpusSpec spec;
    spec.V = 48;
    spec.count = 64;
    spec.max_len = 12;
    const Corpus corpus = synthetic_corpus(spec);

    SUBCASE("zero steps saves only the initial checkpoint") {
        const auto dir = scratch_dir("zero");
        Model<float> m(small_config(), 1);
        TrainConfig t = short_run(0);
        t.out_dir = dir.string();
        const TrainResult r = train_loop(m, corpus, t);
        CHECK(r.metrics.empty());
        REQUIRE(r.checkpoint_paths.size() == 1);
        CHECK(r.final_checkpoint.step == 0);
        Model<float> fresh(small_config(), 1);
        CHECK(slurp(r.checkpoint_paths[0]) == as_string(make_checkpoint(fresh, 0).serialize()));
        std::filesystem::remove_all(dir);
    }
    SUBCASE("fixed seed gives byte-identical checkpoints at every save") {
        const auto d1 = scratch_dir("run1"), d2 = scratch_dir("run2");
        std::vector<std::string> paths[2];
        int k = 0;
        for (const auto& d : {d1, d2}) {
            Model<float> m(small_config(), 7);
            TrainConfig t = short_run(6, 11);
            t.checkpoint_every = 3;
            t.out_dir = d.string();
            paths[k++] = train_loop(m, corpus, t).checkpoint_paths;
        }
        REQUIRE(paths[0].size() == 3);
        REQUIRE(paths[1].size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(std::filesystem::path(paths[0][i]).filename() == std::filesystem::path(paths[1][i]).filename());
            CHECK(slurp(paths[0][i]) == slurp(paths[1][i]));
        }
        CHECK(slurp(paths[0][0]) != slurp(paths[0][2]));
        const std::string csv = slurp(d1 / "metrics.csv");
        CHECK(csv.rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
        std::filesystem::remove_all(d1);
        std::filesystem::remove_all(d2);
    }
    SUBCASE("every parameter receives gradient and a step moves it") {
        EncoderConfig c = small_config("MT");
        c.dropout = 0.0;
        Model<double> m(c, 3);
        TrainConfig t = short_run(2);
        const BatchEncoding b = mlm_batch(corpus, 1, c.V, t);
        auto loss = mlm_loss(mlm_logits(encoder_forward(b, m), m), std::span<const std::int32_t>(b.labels));
        const Gradients<double> g = backward(loss, m.params);
        REQUIRE(g.size() == m.params.size());
        AdamState<double> st;
        Model<double> before(c, 3);
        adam_update(m.params, g, st, 1, 1e-3, t);
        for (std::size_t i = 0; i < m.params.size(); ++i) {
            const auto& name = m.params.entries()[i].name;
            const Tensor<double>& grad = g.at(name);
            double gmax = 0;
            for (double x : grad.values()) gmax = std::max(gmax, std::abs(x));
            CAPTURE(name);
            CHECK(gmax > 0.0);
            CHECK(m.params.entries()[i].var.value() != before.params.entries()[i].var.value());
        }
    }
    SUBCASE("out-of-vocabulary corpora are rejected") {
        Model<float> m(small_config(), 1);
        CHECK_THROWS_AS(train_loop(m, Corpus{{5, 60}}, short_run(1)), VocabularyError);
        CHECK_THROWS_AS(train_loop(m, Corpus{}, short_run(1)), TrainingError);
    }
    SUBCASE("a diverging run stops with a parameter report") {
        Model<float> m(small_config(), 1);
        m.params.get("embed.token").mutable_value()[5 * 16] = std::numeric_limits<float>::infinity();
        try {
            train_loop(m, corpus, short_run(2));
            FAIL("expected TrainingError");
        } catch (const TrainingError& e) {
            const std::string what = e.what();
            CHECK(what.find("step 1") != std::string::npos);
            CHECK(what.find("embed.token") != std::string::npos);
        }
    }
}

TEST_CASE("evaluate_mlm is deterministic") {
    CorpusSpec spec;
    spec.V = 48;
    spec.count = 40;
    const Corpus corpus = synthetic_corpus(spec);
    Model<float> m(small_config(), 2);
    const EvalResult a = evaluate_mlm(m, corpus, 8, 3), b = evaluate_mlm(m, corpus, 8, 3);
    CHECK(a.loss == b.loss);
    CHECK(a.count == b.count);
    CHECK(a.count > 0);
    CHECK(a.accuracy >= 0.0);
    CHECK(a.accuracy <= 1.0);
}

TEST_CASE("classification fine-tune") {
    const auto data = synthetic_classification(64, 200, 4);
    std::size_t ones = 0;
    for (const auto& s : data) ones += s.label == 1;
    CHECK(ones > 60);
    CHECK(ones < 140);

    EncoderConfig c = small_config("MT", 64);
    c.num_classes = 2;
    c.dropout = 0.0;
    Model<float> m(c, 5);
    TrainConfig t = short_run(300, 2);
    t.batch_size = 16;
    t.peak_lr = 3e-3;
    const auto rows = finetune(m, data, t, PoolingMode::MAP);
    CHECK(rows.size() == 300);
    const EvalResult r = evaluate_classifier(m, synthetic_classification(64, 200, 99), PoolingMode::MAP);
    CHECK(r.accuracy >= 0.7);

    Model<float> no_head(small_config("MT", 64), 5);
    CHECK_THROWS_AS(finetune(no_head, data, t, PoolingMode::MAP), ConfigError);
}

TEST_CASE("checkpoints") {
    EncoderConfig c = small_config("MMT");
    Model<double> m(c, 4);
    const Checkpoint ck = make_checkpoint(m, 12);
    const std::vector<char> bytes = ck.serialize();

    SUBCASE("round trip is byte-identical") {
        const Checkpoint back = Checkpoint::deserialize(bytes);
        CHECK(back.step == 12);
        CHECK(back.serialize() == bytes);
        Model<double> loaded = model_from_checkpoint<double>(back);
        CHECK(make_checkpoint(loaded, 12).serialize() == bytes);
        for (std::size_t i = 0; i < m.params.size(); ++i)
            CHECK(loaded.params.entries()[i].var.value() == m.params.entries()[i].var.value());
    }
    SUBCASE("manifest covers every parameter") {
        const auto manifest = ck.manifest();
        REQUIRE(manifest.size() == m.params.size());
        std::size_t offset = 0;
        for (std::size_t i = 0; i < manifest.size(); ++i) {
            CHECK(manifest[i]["name"] == m.params.entries()[i].name);
            CHECK(manifest[i]["dtype"] == "f64");
            CHECK(manifest[i]["offset"].get<std::size_t>() == offset);
            offset += manifest[i]["nbytes"].get<std::size_t>();
        }
        CHECK(offset == parameter_count(c) * sizeof(double));
    }
    SUBCASE("files") {
        const auto dir = scratch_dir("ckpt");
        const std::string path = (dir / "a.bin").string();
        save_checkpoint(ck, path);
        CHECK(slurp(path) == as_string(bytes));
        CHECK(load_checkpoint(path).serialize() == bytes);
        CHECK_THROWS_AS(load_checkpoint((dir / "none.bin").string()), CheckpointError);
        std::filesystem::remove_all(dir);
    }
    SUBCASE("corruption is detected") {
        CHECK_THROWS_AS(Checkpoint::deserialize(std::vector<char>(bytes.begin(), bytes.end() - 1)), CheckpointError);
        std::vector<char> extra = bytes;
        extra.push_back('x');
        CHECK_THROWS_AS(Checkpoint::deserialize(extra), CheckpointError);
        std::vector<char> bad_magic = bytes;
        bad_magic[0] = 'X';
        CHECK_THROWS_AS(Checkpoint::deserialize(bad_magic), CheckpointError);
        CHECK_THROWS_AS(Checkpoint::deserialize({}), CheckpointError);
        std::vector<char> bad_version = bytes;
        bad_version[8] = 9;
        CHECK_THROWS_AS(Checkpoint::deserialize(bad_version), CheckpointError);
    }
    SUBCASE("loading into the wrong precision or shape fails") {
        CHECK_THROWS_AS(model_from_checkpoint<float>(ck), CheckpointError);
        Model<double> other(small_config("MT"), 4);
        CHECK(load_matching_parameters(other, ck) > 0);
    }
}
