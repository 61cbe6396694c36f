#include "mabert/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mabert/rng.hpp"

namespace mabert {

std::size_t TrainConfig::warmup_steps() const {
    return warmup ? warmup : total_steps / 20;
}

void TrainConfig::validate() const {
    if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("peak_lr must be positive");
    if (total_steps > 0 && warmup_steps() >= total_steps) {
        throw ConfigError("warmup (" + std::to_string(warmup_steps()) + ") must be smaller than total_steps (" +
                          std::to_string(total_steps) + ")");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    const double split = masking.mask_fraction + masking.random_fraction + masking.keep_fraction;
    if (std::abs(split - 1.0) > 1e-9) throw ConfigError("mask/random/keep fractions must sum to 1");
    if (masking.mask_fraction < 0 || masking.random_fraction < 0 || masking.keep_fraction < 0) {
        throw ConfigError("mask/random/keep fractions must be non-negative");
    }
    if (!(masking.probability > 0.0 && masking.probability <= 1.0)) {
        throw ConfigError("mlm_probability must lie in (0, 1]");
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    parse_dtype(dtype);
    if (max_len == 0 || long_max_len == 0) throw ConfigError("max_len and long_max_len must be >= 1");
    if (!(long_phase_fraction >= 0 && long_phase_fraction < 1)) {
        throw ConfigError("long_phase_fraction must lie in [0, 1)");
    }
}

nlohmann::json TrainConfig::to_json() const {
    return {{"peak_lr", peak_lr},
            {"warmup", warmup},
            {"total_steps", total_steps},
            {"batch_size", batch_size},
            {"mlm_probability", masking.probability},
            {"mask_fraction", masking.mask_fraction},
            {"random_fraction", masking.random_fraction},
            {"keep_fraction", masking.keep_fraction},
            {"beta1", beta1},
            {"beta2", beta2},
            {"eps", eps},
            {"weight_decay", weight_decay},
            {"seed", seed},
            {"dtype", dtype},
            {"max_len", max_len},
            {"long_phase_fraction", long_phase_fraction},
            {"long_max_len", long_max_len},
            {"checkpoint_every", checkpoint_every},
            {"out_dir", out_dir}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    const nlohmann::json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.contains(it.key())) throw ConfigError("unknown train config key '" + it.key() + "'");
    }
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config key '") + key + "': " + e.what());
        }
    };
    get("peak_lr", c.peak_lr);
    get("warmup", c.warmup);
    get("total_steps", c.total_steps);
    get("batch_size", c.batch_size);
    get("mlm_probability", c.masking.probability);
    get("mask_fraction", c.masking.mask_fraction);
    get("random_fraction", c.masking.random_fraction);
    get("keep_fraction", c.masking.keep_fraction);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("eps", c.eps);
    get("weight_decay", c.weight_decay);
    get("seed", c.seed);
    get("dtype", c.dtype);
    get("max_len", c.max_len);
    get("long_phase_fraction", c.long_phase_fraction);
    get("long_max_len", c.long_max_len);
    get("checkpoint_every", c.checkpoint_every);
    get("out_dir", c.out_dir);
    c.validate();
    return c;
}

double learning_rate(std::size_t step, const TrainConfig& cfg) {
    const std::size_t warm = cfg.warmup_steps();
    if (step <= warm && warm > 0) return cfg.peak_lr * double(step) / double(warm);
    if (step >= cfg.total_steps) return 0.0;
    return cfg.peak_lr * double(cfg.total_steps - step) / double(cfg.total_steps - warm);
}

template <typename T>
void adam_update(ParamStore<T>& params, const Gradients<T>& grads, AdamState<T>& state, std::size_t step, double lr,
                 const TrainConfig& cfg) {
    if (step == 0) throw ContractError("adam step index is 1-based");
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(step));
    const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
    for (auto& e : params.entries()) {
        auto git = grads.find(e.name);
        if (git == grads.end()) continue;
        const Tensor<T>& g = git->second;
        Tensor<T>& p = e.var.mutable_value();
        if (g.shape() != p.shape()) {
            throw DimensionError("gradient for '" + e.name + "' has shape " + shape_str(g.shape()) + ", parameter " +
                                 shape_str(p.shape()));
        }
        auto [mit, m_new] = state.m.try_emplace(e.name, p.shape());
        auto [vit, v_new] = state.v.try_emplace(e.name, p.shape());
        Tensor<T>& m = mit->second;
        Tensor<T>& v = vit->second;
        if (m.shape() != p.shape() || v.shape() != p.shape()) {
            throw DimensionError("Adam moments for '" + e.name + "' do not match the parameter shape");
        }
        const T decay = e.decay ? T(1.0 - lr * cfg.weight_decay) : T(1);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            const double mhat = double(m[i]) / bc1;
            const double vhat = double(v[i]) / bc2;
            p[i] = p[i] * decay - T(lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

template <typename T>
Var<T> mlm_loss(const Var<T>& logits, std::span<const std::int32_t> labels) {
    const Shape& s = logits.shape();
    if (s.empty()) throw DimensionError("mlm_loss needs logits with a vocabulary axis");
    const std::size_t V = s.back();
    const std::size_t rows = logits.numel() / std::max<std::size_t>(V, 1);
    Var<T> flat = s.size() == 2 ? logits : reshape(logits, {rows, V});
    return cross_entropy(flat, labels);
}

namespace {

std::size_t phase_max_len(std::size_t step, const TrainConfig& cfg) {
    if (cfg.long_phase_fraction <= 0) return cfg.max_len;
    const auto long_steps = static_cast<std::size_t>(std::ceil(cfg.long_phase_fraction * double(cfg.total_steps)));
    return step + long_steps > cfg.total_steps ? cfg.long_max_len : cfg.max_len;
}

std::vector<std::vector<std::int32_t>> truncated(std::vector<std::vector<std::int32_t>> seqs, std::size_t max_len) {
    for (auto& s : seqs) {
        if (s.size() > max_len) s.resize(max_len);
    }
    return seqs;
}

template <typename T>
double masked_accuracy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
    const std::size_t V = logits.extent(1);
    std::size_t hit = 0, n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kIgnoreLabel) continue;
        const T* row = logits.data() + i * V;
        hit += static_cast<std::size_t>(std::max_element(row, row + V) - row) == static_cast<std::size_t>(labels[i]);
        ++n;
    }
    return n ? double(hit) / double(n) : 0.0;
}

struct LabeledRows {
    std::vector<std::size_t> rows;
    std::vector<std::int32_t> labels;
};

LabeledRows labeled_rows(const BatchEncoding& batch) {
    LabeledRows out;
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
        if (batch.labels[i] == kIgnoreLabel) continue;
        out.rows.push_back(i);
        out.labels.push_back(batch.labels[i]);
    }
    return out;
}

template <typename T>
std::string norm_report(const ParamStore<T>& params) {
    std::ostringstream os;
    bool first = true;
    for (const auto& e : params.entries()) {
        double s = 0;
        for (std::size_t i = 0; i < e.var.numel(); ++i) s += double(e.var.value()[i]) * double(e.var.value()[i]);
        os << (first ? "" : ", ") << e.name << "=" << std::sqrt(s);
        first = false;
    }
    return os.str();
}

template <typename T>
bool all_finite(const ParamStore<T>& params) {
    for (const auto& e : params.entries())
        for (std::size_t i = 0; i < e.var.numel(); ++i)
            if (!std::isfinite(double(e.var.value()[i]))) return false;
    return true;
}

template <typename T>
[[noreturn]] void diverged(std::size_t step, const ParamStore<T>& params) {
    throw TrainingError("non-finite loss at step " + std::to_string(step) + "; parameter norms: " + norm_report(params));
}

std::string checkpoint_path(const std::string& dir, std::size_t step) {
    char name[32];
    std::snprintf(name, sizeof(name), "ckpt_%06zu.bin", step);
    return (std::filesystem::path(dir) / name).string();
}

}  // namespace

BatchEncoding mlm_batch(const Corpus& corpus, std::size_t step, std::size_t V, const TrainConfig& cfg) {
    if (corpus.empty()) throw TrainingError("training corpus is empty");
    std::mt19937_64 pick = keyed_engine(cfg.seed, "batch", step);
    std::uniform_int_distribution<std::size_t> index(0, corpus.size() - 1);
    std::vector<std::vector<std::int32_t>> seqs;
    seqs.reserve(cfg.batch_size);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) seqs.push_back(corpus[index(pick)]);
    const BatchEncoding clean = make_batch(truncated(std::move(seqs), phase_max_len(step, cfg)));
    std::mt19937_64 mask_rng = keyed_engine(cfg.seed, "mask", step);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        BatchEncoding batch = clean;
        if (mlm_mask_batch(batch, mask_rng, V, cfg.masking).selected > 0) return batch;
    }
    throw TrainingError("degenerate batch at step " + std::to_string(step) + ": no maskable tokens");
}

template <typename T>
TrainResult train_loop(Model<T>& model, const Corpus& corpus, const TrainConfig& cfg,
                       const std::function<void(const MetricsRow&)>& on_step) {
    cfg.validate();
    if (corpus.empty()) throw TrainingError("training corpus is empty");
    const std::size_t V = model.config.V;
    for (const auto& seq : corpus) {
        for (std::int32_t id : seq) {
            if (id < 0 || static_cast<std::size_t>(id) >= V) {
                throw VocabularyError("corpus id " + std::to_string(id) + " outside vocabulary of size " +
                                      std::to_string(V));
            }
        }
    }
    TrainResult result;
    std::ofstream metrics;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        const auto path = std::filesystem::path(cfg.out_dir) / "metrics.csv";
        const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
        metrics.open(path, std::ios::app);
        if (!metrics) throw std::runtime_error("cannot open metrics file '" + path.string() + "'");
        if (fresh) metrics << kMetricsHeader << '\n';
    }
    auto save = [&](std::size_t step) {
        Checkpoint ck = make_checkpoint(model, step);
        if (!cfg.out_dir.empty()) {
            const std::string path = checkpoint_path(cfg.out_dir, step);
            save_checkpoint(ck, path);
            result.checkpoint_paths.push_back(path);
        }
        result.final_checkpoint = std::move(ck);
    };
    save(0);
    AdamState<T> adam;
    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const BatchEncoding batch = mlm_batch(corpus, step, V, cfg);
        const LabeledRows lr = labeled_rows(batch);
        const ForwardContext ctx{true, cfg.seed, step};
        Var<T> logits, loss;
        try {
            Var<T> H = encoder_forward(batch, model, ctx);
            logits = mlm_logits_at(H, std::span<const std::size_t>(lr.rows), model);
            loss = mlm_loss(logits, std::span<const std::int32_t>(lr.labels));
        } catch (const ContractError&) {
            if (!all_finite(model.params)) diverged(step, model.params);
            throw;
        }
        const double loss_value = double(loss.value().item());
        if (!std::isfinite(loss_value)) diverged(step, model.params);
        MetricsRow row;
        row.step = step;
        row.loss = loss_value;
        row.masked_acc = masked_accuracy(logits.value(), std::span<const std::int32_t>(lr.labels));
        row.lr = learning_rate(step, cfg);
        Gradients<T> grads = backward(loss, model.params);
        adam_update(model.params, grads, adam, step, row.lr, cfg);
        model.params.zero_grad();
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (metrics.is_open()) {
            metrics << row.step << ',' << row.loss << ',' << row.masked_acc << ',' << row.lr << ',' << row.wall_ms
                    << '\n';
        }
        if (on_step) on_step(row);
        result.metrics.push_back(row);
        if (step == cfg.total_steps || (cfg.checkpoint_every && step % cfg.checkpoint_every == 0)) save(step);
    }
    return result;
}

template <typename T>
EvalResult evaluate_mlm(const Model<T>& model, const Corpus& corpus, std::size_t batch_size, std::uint64_t seed,
                        std::size_t max_len) {
    if (corpus.empty()) throw TrainingError("evaluation corpus is empty");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    NoGradGuard guard;
    EvalResult out;
    double loss_sum = 0, hit_sum = 0;
    MaskingConfig masking;
    for (std::size_t start = 0, b = 0; start < corpus.size(); start += batch_size, ++b) {
        const std::size_t end = std::min(corpus.size(), start + batch_size);
        BatchEncoding batch =
            make_batch(truncated(Corpus(corpus.begin() + long(start), corpus.begin() + long(end)), max_len));
        std::mt19937_64 rng = keyed_engine(seed, "eval-mask", b);
        if (mlm_mask_batch(batch, rng, model.config.V, masking).selected == 0) continue;
        const LabeledRows lr = labeled_rows(batch);
        Var<T> H = encoder_forward(batch, model);
        Var<T> logits = mlm_logits_at(H, std::span<const std::size_t>(lr.rows), model);
        const double n = double(lr.rows.size());
        loss_sum += n * double(mlm_loss(logits, std::span<const std::int32_t>(lr.labels)).value().item());
        hit_sum += n * masked_accuracy(logits.value(), std::span<const std::int32_t>(lr.labels));
        out.count += lr.rows.size();
    }
    if (out.count == 0) throw TrainingError("evaluation produced no masked positions");
    out.loss = loss_sum / double(out.count);
    out.accuracy = hit_sum / double(out.count);
    return out;
}

std::vector<LabeledSequence> synthetic_classification(std::size_t V, std::size_t count, std::uint64_t seed,
                                                      std::size_t min_len, std::size_t max_len) {
    CorpusSpec spec;
    spec.V = V;
    spec.count = count;
    spec.min_len = min_len;
    spec.max_len = max_len;
    spec.seed = seed;
    spec.kind = "copy-grammar";
    const Corpus copy = synthetic_corpus(spec);
    spec.kind = "bigram";
    const Corpus chain = synthetic_corpus(spec);
    std::mt19937_64 rng = keyed_engine(seed, "classify");
    std::bernoulli_distribution coin(0.5);
    std::vector<LabeledSequence> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const bool positive = coin(rng);
        out.push_back({positive ? copy[i] : chain[i], positive ? 1 : 0});
    }
    return out;
}

namespace {

template <typename T>
Var<T> classifier_logits(const BatchEncoding& batch, const Model<T>& model, PoolingMode mode,
                         const ForwardContext& ctx) {
    Var<T> H = encoder_forward(batch, model, ctx);
    const Tensor<T> mask = batch.mask_tensor<T>();
    Var<T> h = pool(H, mask, mode, model.map, config_kappa<T>(model.config));
    return classify(h, model.head, ctx.train ? model.config.dropout : 0.0, ctx);
}

}  // namespace

template <typename T>
std::vector<MetricsRow> finetune(Model<T>& model, const std::vector<LabeledSequence>& data, const TrainConfig& cfg,
                                 PoolingMode mode, const std::function<void(const MetricsRow&)>& on_step) {
    cfg.validate();
    if (model.config.num_classes == 0) throw ConfigError("fine-tuning needs a model with num_classes > 0");
    if (data.empty()) throw TrainingError("fine-tuning data is empty");
    std::vector<MetricsRow> out;
    AdamState<T> adam;
    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        std::mt19937_64 pick = keyed_engine(cfg.seed, "finetune-batch", step);
        std::uniform_int_distribution<std::size_t> index(0, data.size() - 1);
        std::vector<std::vector<std::int32_t>> seqs;
        std::vector<std::int32_t> labels;
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
            const auto& ex = data[index(pick)];
            seqs.push_back(ex.ids);
            labels.push_back(ex.label);
        }
        const BatchEncoding batch = make_batch(truncated(std::move(seqs), cfg.max_len));
        const ForwardContext ctx{true, cfg.seed, step};
        Var<T> logits, loss;
        try {
            logits = classifier_logits(batch, model, mode, ctx);
            loss = cross_entropy(logits, std::span<const std::int32_t>(labels));
        } catch (const ContractError&) {
            if (!all_finite(model.params)) diverged(step, model.params);
            throw;
        }
        MetricsRow row;
        row.step = step;
        row.loss = double(loss.value().item());
        if (!std::isfinite(row.loss)) diverged(step, model.params);
        row.masked_acc = masked_accuracy(logits.value(), std::span<const std::int32_t>(labels));
        row.lr = learning_rate(step, cfg);
        Gradients<T> grads = backward(loss, model.params);
        adam_update(model.params, grads, adam, step, row.lr, cfg);
        model.params.zero_grad();
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (on_step) on_step(row);
        out.push_back(row);
    }
    return out;
}

template <typename T>
EvalResult evaluate_classifier(const Model<T>& model, const std::vector<LabeledSequence>& data, PoolingMode mode,
                               std::size_t batch_size) {
    if (model.config.num_classes == 0) throw ConfigError("classifier evaluation needs num_classes > 0");
    if (data.empty()) throw TrainingError("evaluation data is empty");
    NoGradGuard guard;
    EvalResult out;
    double loss_sum = 0, hit_sum = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t end = std::min(data.size(), start + batch_size);
        std::vector<std::vector<std::int32_t>> seqs;
        std::vector<std::int32_t> labels;
        for (std::size_t i = start; i < end; ++i) {
            seqs.push_back(data[i].ids);
            labels.push_back(data[i].label);
        }
        Var<T> logits = classifier_logits(make_batch(seqs), model, mode, ForwardContext{});
        const double n = double(labels.size());
        loss_sum += n * double(cross_entropy(logits, std::span<const std::int32_t>(labels)).value().item());
        hit_sum += n * masked_accuracy(logits.value(), std::span<const std::int32_t>(labels));
        out.count += labels.size();
    }
    out.loss = loss_sum / double(out.count);
    out.accuracy = hit_sum / double(out.count);
    return out;
}

#define MABERT_INSTANTIATE_TRAIN(T)                                                                                 \
    template void adam_update(ParamStore<T>&, const Gradients<T>&, AdamState<T>&, std::size_t, double,              \
                              const TrainConfig&);                                                                  \
    template Var<T> mlm_loss(const Var<T>&, std::span<const std::int32_t>);                                         \
    template TrainResult train_loop(Model<T>&, const Corpus&, const TrainConfig&,                                   \
                                    const std::function<void(const MetricsRow&)>&);                                 \
    template EvalResult evaluate_mlm(const Model<T>&, const Corpus&, std::size_t, std::uint64_t, std::size_t);      \
    template std::vector<MetricsRow> finetune(Model<T>&, const std::vector<LabeledSequence>&, const TrainConfig&,   \
                                              PoolingMode, const std::function<void(const MetricsRow&)>&);          \
    template EvalResult evaluate_classifier(const Model<T>&, const std::vector<LabeledSequence>&, PoolingMode,      \
                                           std::size_t);

MABERT_INSTANTIATE_TRAIN(float)
MABERT_INSTANTIATE_TRAIN(double)
template Var<long double> mlm_loss(const Var<long double>&, std::span<const std::int32_t>);

}  // namespace mabert
