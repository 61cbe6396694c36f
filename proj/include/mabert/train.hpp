#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabert/checkpoint.hpp"
#include "mabert/data.hpp"
#include "mabert/heads.hpp"

namespace mabert {

struct TrainConfig {
    double peak_lr = 3e-4;
    std::size_t warmup = 0;  // 0 selects 5% of total_steps
    std::size_t total_steps = 2000;
    std::size_t batch_size = 16;
    MaskingConfig masking;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    std::string dtype = "f32";
    // Content tokens per sequence are truncated to max_len; the last
    // long_phase_fraction of the steps use long_max_len instead.
    std::size_t max_len = 128;
    double long_phase_fraction = 0.0;
    std::size_t long_max_len = 512;
    std::size_t checkpoint_every = 0;  // 0 saves only the initial and final checkpoints
    std::string out_dir;               // empty keeps everything in memory

    std::size_t warmup_steps() const;
    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
    static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }
};

// Learning rate for 1-based `step`: linear warmup to peak_lr, then linear decay to 0 at total_steps.
double learning_rate(std::size_t step, const TrainConfig& cfg);

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m, v;
};

// Decoupled decay first (p <- p (1 - lr wd), decay-flagged params only), then the
// bias-corrected Adam delta. `step` is 1-based.
template <typename T>
void adam_update(ParamStore<T>& params, const Gradients<T>& grads, AdamState<T>& state, std::size_t step, double lr,
                 const TrainConfig& cfg);

template <typename T>
void adam_step(ParamStore<T>& params, const Gradients<T>& grads, AdamState<T>& state, std::size_t step,
               const TrainConfig& cfg) {
    adam_update(params, grads, state, step, learning_rate(step, cfg), cfg);
}

// Mean cross-entropy over positions whose label is not -1. Logits are [..., V] with
// one label per leading position.
template <typename T>
Var<T> mlm_loss(const Var<T>& logits, std::span<const std::int32_t> labels);

struct MetricsRow {
    std::size_t step = 0;
    double loss = 0;
    double masked_acc = 0;
    double lr = 0;
    double wall_ms = 0;
};

inline constexpr const char* kMetricsHeader = "step,loss,masked_acc,lr,wall_ms";

struct TrainResult {
    std::vector<MetricsRow> metrics;
    std::vector<std::string> checkpoint_paths;
    Checkpoint final_checkpoint;
};

// The batch for `step`: sequences drawn with a (seed, "batch", step) stream and
// corrupted with a (seed, "mask", step) stream. Redraws the corruption until at
// least one position is labeled.
BatchEncoding mlm_batch(const Corpus& corpus, std::size_t step, std::size_t V, const TrainConfig& cfg);

template <typename T>
TrainResult train_loop(Model<T>& model, const Corpus& corpus, const TrainConfig& cfg,
                       const std::function<void(const MetricsRow&)>& on_step = {});

struct EvalResult {
    double loss = 0;
    double accuracy = 0;
    std::size_t count = 0;
};

// Masked-token loss and accuracy over `corpus` with a fixed corruption seed.
template <typename T>
EvalResult evaluate_mlm(const Model<T>& model, const Corpus& corpus, std::size_t batch_size, std::uint64_t seed,
                        std::size_t max_len = 128);

struct LabeledSequence {
    std::vector<std::int32_t> ids;
    std::int32_t label = 0;
};

// Two-class task: label 1 when the sequence was drawn from the copy grammar and 0 when
// it comes from the bigram chain.
std::vector<LabeledSequence> synthetic_classification(std::size_t V, std::size_t count, std::uint64_t seed,
                                                      std::size_t min_len = 8, std::size_t max_len = 24);

// Fine-tunes encoder + pooling + classifier with the pretraining optimizer.
template <typename T>
std::vector<MetricsRow> finetune(Model<T>& model, const std::vector<LabeledSequence>& data, const TrainConfig& cfg,
                                 PoolingMode mode, const std::function<void(const MetricsRow&)>& on_step = {});

template <typename T>
EvalResult evaluate_classifier(const Model<T>& model, const std::vector<LabeledSequence>& data, PoolingMode mode,
                               std::size_t batch_size = 32);

}  // namespace mabert
