#include <pybind11/iostream.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <random>
#include <variant>

#include "mabert/checkpoint.hpp"
#include "mabert/cli.hpp"
#include "mabert/diagnostics.hpp"
#include "mabert/train.hpp"

namespace py = pybind11;
using namespace mabert;
using json = nlohmann::json;

namespace {

using Seqs = std::vector<std::vector<std::int32_t>>;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename M>
struct scalar_of;
template <typename T>
struct scalar_of<Model<T>> {
    using type = T;
};
template <typename M>
using scalar_of_t = typename scalar_of<std::remove_cvref_t<M>>::type;

template <typename T>
Array to_numpy(const Tensor<T>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    double* dst = out.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) dst[i] = double(t[i]);
    return out;
}

template <typename T>
Tensor<T> from_numpy(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    Tensor<T> t(shape);
    const double* src = a.data();
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = T(src[i]);
    return t;
}

class PyModel {
    template <typename Fn>
    decltype(auto) visit(Fn&& fn) const {
        return std::visit([&](const auto& p) -> decltype(auto) { return fn(*p); }, model_);
    }
    template <typename Fn>
    decltype(auto) visit(Fn&& fn) {
        return std::visit([&](auto& p) -> decltype(auto) { return fn(*p); }, model_);
    }

public:
    PyModel(const std::string& config, std::uint64_t seed) : PyModel(EncoderConfig::from_json(json::parse(config)), seed) {}

    explicit PyModel(const Checkpoint& ck) {
        const EncoderConfig c = EncoderConfig::from_json(ck.config);
        if (parse_dtype(c.dtype) == DType::Float64)
            model_ = std::make_shared<Model<double>>(model_from_checkpoint<double>(ck));
        else
            model_ = std::make_shared<Model<float>>(model_from_checkpoint<float>(ck));
    }

    std::string config() const {
        return visit([](const auto& m) { return m.config.to_json().dump(); });
    }
    std::size_t num_parameters() const {
        return visit([](const auto& m) { return m.params.scalar_count(); });
    }
    std::vector<std::string> parameter_names() const {
        return visit([](const auto& m) {
            std::vector<std::string> names;
            for (const auto& e : m.params.entries()) names.push_back(e.name);
            return names;
        });
    }
    Array get_parameter(const std::string& name) const {
        return visit([&](const auto& m) { return to_numpy(m.params.get(name).value()); });
    }
    void set_parameter(const std::string& name, const Array& values) {
        visit([&](auto& m) {
            using T = scalar_of_t<decltype(m)>;
            auto& dst = m.params.get(name).mutable_value();
            Tensor<T> src = from_numpy<T>(values);
            if (src.shape() != dst.shape()) {
                throw DimensionError("parameter " + name + " has shape " + shape_str(dst.shape()) + ", got " +
                                     shape_str(src.shape()));
            }
            dst = std::move(src);
        });
    }

    Array encode(const Seqs& seqs, std::size_t pad, const std::string& psm_mode) const {
        return visit([&](const auto& m) {
            EncoderConfig c = m.config;
            if (!psm_mode.empty()) c.psm_mode = psm_mode;
            NoGradGuard guard;
            return to_numpy(encoder_forward(make_batch(seqs, pad), m, c).value());
        });
    }
    Array pooled(const Seqs& seqs, const std::string& mode, std::size_t pad) const {
        return visit([&](const auto& m) {
            using T = scalar_of_t<decltype(m)>;
            NoGradGuard guard;
            const BatchEncoding b = make_batch(seqs, pad);
            const Tensor<T> mask = b.mask_tensor<T>();
            auto H = encoder_forward(b, m);
            return to_numpy(pool(H, mask, parse_pooling(mode), m.map, config_kappa<T>(m.config)).value());
        });
    }
    Array logits(const Seqs& seqs) const {
        return visit([&](const auto& m) {
            NoGradGuard guard;
            return to_numpy(mlm_logits(encoder_forward(make_batch(seqs), m), m).value());
        });
    }
    py::list train(const Seqs& corpus, const std::string& train_config) {
        const TrainConfig tc = TrainConfig::from_json(json::parse(train_config));
        const TrainResult r = visit([&](auto& m) {
            py::gil_scoped_release release;
            return train_loop(m, corpus, tc);
        });
        py::list rows;
        for (const auto& row : r.metrics) {
            py::dict d;
            d["step"] = row.step;
            d["loss"] = row.loss;
            d["masked_acc"] = row.masked_acc;
            d["lr"] = row.lr;
            d["wall_ms"] = row.wall_ms;
            rows.append(d);
        }
        return rows;
    }
    py::dict evaluate(const Seqs& corpus, std::size_t batch, std::uint64_t seed) const {
        const EvalResult r = visit([&](const auto& m) { return evaluate_mlm(m, corpus, batch, seed); });
        py::dict d;
        d["loss"] = r.loss;
        d["accuracy"] = r.accuracy;
        d["count"] = r.count;
        return d;
    }
    void save(const std::string& path, std::size_t step) const {
        visit([&](const auto& m) { save_checkpoint(make_checkpoint(m, step), path); });
    }

private:
    PyModel(const EncoderConfig& c, std::uint64_t seed) {
        if (parse_dtype(c.dtype) == DType::Float64)
            model_ = std::make_shared<Model<double>>(c, seed);
        else
            model_ = std::make_shared<Model<float>>(c, seed);
    }

    std::variant<std::shared_ptr<Model<float>>, std::shared_ptr<Model<double>>> model_;
};

py::dict stats_dict(const MaskingStats& s) {
    py::dict d;
    d["eligible"] = s.eligible;
    d["selected"] = s.selected;
    d["to_mask"] = s.to_mask;
    d["to_random"] = s.to_random;
    d["kept"] = s.kept;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Hybrid Mamba/attention encoder with padding-safe masking.";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<PatternError>(m, "PatternError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<InvalidMaskError>(m, "InvalidMaskError", PyExc_ValueError);
    py::register_exception<VocabularyError>(m, "VocabularyError", PyExc_IndexError);
    py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
    py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

    m.attr("PAD") = kPad;
    m.attr("CLS") = kCls;
    m.attr("SEP") = kSep;
    m.attr("MASK") = kMask;
    m.attr("UNK") = kUnk;

    m.def("default_config", [] { return EncoderConfig{}.to_json().dump(); });
    m.def("probe_config", [] { return probe_model_config().to_json().dump(); });
    m.def("normalize_config", [](const std::string& c) { return EncoderConfig::from_json(json::parse(c)).to_json().dump(); });
    m.def("default_train_config", [] { return TrainConfig{}.to_json().dump(); });
    m.def("parameter_count", [](const std::string& c) { return parameter_count(EncoderConfig::from_json(json::parse(c))); });
    m.def("parse_pattern", [](const std::string& s) { return parse_pattern(s).str(); });
    m.def("reference_patterns", &reference_patterns);

    py::class_<PyModel>(m, "_Model")
        .def(py::init<const std::string&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
        .def_static("load", [](const std::string& path) { return PyModel(load_checkpoint(path)); })
        .def("config", &PyModel::config)
        .def("num_parameters", &PyModel::num_parameters)
        .def("parameter_names", &PyModel::parameter_names)
        .def("get_parameter", &PyModel::get_parameter)
        .def("set_parameter", &PyModel::set_parameter)
        .def("encode", &PyModel::encode, py::arg("sequences"), py::arg("pad") = 0, py::arg("psm_mode") = "")
        .def("pool", &PyModel::pooled, py::arg("sequences"), py::arg("mode") = "map", py::arg("pad") = 0)
        .def("mlm_logits", &PyModel::logits)
        .def("train", &PyModel::train)
        .def("evaluate", &PyModel::evaluate, py::arg("corpus"), py::arg("batch") = 32, py::arg("seed") = 0)
        .def("save", &PyModel::save, py::arg("path"), py::arg("step") = 0);

    m.def(
        "selective_scan",
        [](const Array& u, const Array& delta, const Array& b, const Array& c, const Array& A_log, const Array& D_skip,
           std::optional<Array> mask, const std::string& direction) {
            ScanCoefficients<double> co{constant(from_numpy<double>(delta)), constant(from_numpy<double>(b)),
                                        constant(from_numpy<double>(c))};
            std::optional<Tensor<double>> mt;
            if (mask) mt = from_numpy<double>(*mask);
            return to_numpy(selective_scan(constant(from_numpy<double>(u)), co, constant(from_numpy<double>(A_log)),
                                           constant(from_numpy<double>(D_skip)), mt ? &*mt : nullptr,
                                           parse_scan_direction(direction))
                                .value());
        },
        py::arg("u"), py::arg("delta"), py::arg("b"), py::arg("c"), py::arg("A_log"), py::arg("D_skip"),
        py::arg("mask") = std::nullopt, py::arg("direction") = "forward");

    m.def("cosine_distance", [](std::vector<double> u, std::vector<double> v) { return cosine_distance(u, v); });

    m.def(
        "synthetic_corpus",
        [](const std::string& kind, std::size_t V, std::size_t count, std::size_t min_len, std::size_t max_len,
           std::size_t offset, std::uint64_t seed) {
            CorpusSpec s;
            s.kind = kind;
            s.V = V;
            s.count = count;
            s.min_len = min_len;
            s.max_len = max_len;
            s.offset = offset;
            s.seed = seed;
            return synthetic_corpus(s);
        },
        py::arg("kind") = "copy-grammar", py::arg("V") = 1024, py::arg("count") = 4096, py::arg("min_len") = 8,
        py::arg("max_len") = 32, py::arg("offset") = 2, py::arg("seed") = 0);

    m.def(
        "mask_batch",
        [](const Seqs& seqs, std::size_t V, std::uint64_t seed, double probability) {
            BatchEncoding b = make_batch(seqs);
            std::mt19937_64 rng(seed);
            MaskingConfig cfg;
            cfg.probability = probability;
            const MaskingStats s = mlm_mask_batch(b, rng, V, cfg);
            return py::make_tuple(b.ids, b.labels, stats_dict(s), py::make_tuple(b.B, b.T));
        },
        py::arg("sequences"), py::arg("V"), py::arg("seed") = 0, py::arg("probability") = 0.15);

    m.def(
        "padding_drift",
        [](const std::string& config, std::uint64_t seed, std::size_t sequences, std::vector<std::size_t> pads,
           std::vector<std::string> modes) {
            const EncoderConfig c = EncoderConfig::from_json(json::parse(config));
            const auto seqs = probe_sequences(c.V, sequences, seed);
            DriftReport r;
            if (parse_dtype(c.dtype) == DType::Float64)
                r = padding_drift_probe(Model<double>(c, seed), seqs, pads, modes);
            else
                r = padding_drift_probe(Model<float>(c, seed), seqs, pads, modes);
            return r.table().to_json().dump();
        },
        py::arg("config"), py::arg("seed") = 0, py::arg("sequences") = 8,
        py::arg("pads") = std::vector<std::size_t>{0, 8, 16, 32, 64},
        py::arg("modes") = std::vector<std::string>{"none", "pre", "post", "pre+post"});

    m.def("cli", [](std::vector<std::string> args) {
        args.insert(args.begin(), "mabert");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        py::scoped_ostream_redirect out;
        py::scoped_estream_redirect err;
        return cli::run(int(argv.size()), argv.data());
    });
}
