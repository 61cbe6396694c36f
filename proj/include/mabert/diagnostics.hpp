#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabert/heads.hpp"

namespace mabert {

enum class Representation { FinalCls, UnmaskedMean, MapPool };

std::string representation_name(Representation r);
Representation parse_representation(const std::string& s);
const std::vector<Representation>& all_representations();

// 1 - <u,v> / (|u| |v|) in double precision. Two zero vectors are at distance 0;
// one zero vector against a nonzero one is at distance 1.
double cosine_distance(std::span<const double> u, std::span<const double> v);

// Column names plus rows of JSON scalars, in column order.
struct ReportTable {
    std::vector<std::string> columns;
    std::vector<std::vector<nlohmann::ordered_json>> rows;

    nlohmann::ordered_json to_json() const;
    static ReportTable from_json(const nlohmann::ordered_json& j);
    std::string to_csv() const;
};

struct DriftRow {
    std::string psm_mode;
    std::size_t pad_added = 0;
    std::string representation;
    double mean = 0;
    double std = 0;
    std::size_t n_samples = 0;
};

struct DriftReport {
    std::vector<DriftRow> rows;

    // Columns: psm_mode, pad_added, representation, mean_distance, std_distance, n_samples.
    ReportTable table() const;
    // Throws std::out_of_range when the cell is absent.
    const DriftRow& at(const std::string& psm_mode, std::size_t pad, Representation r) const;
};

// Randomly initialized family used by the padding probe: D=64, MMT x4, fan-in
// init, centered convolution, no dropout, two-class pooling head.
EncoderConfig probe_model_config();

// Random non-reserved token sequences with uniform lengths in [min_len, max_len].
std::vector<std::vector<std::int32_t>> probe_sequences(std::size_t V, std::size_t count, std::uint64_t seed,
                                                       std::size_t min_len = 4, std::size_t max_len = 12);

// For every sequence, compares representations of the unpadded run against runs
// with `pad` extra PAD positions appended, under each masking mode. Each run is a
// single-row batch [CLS] seq [SEP] PAD...
template <typename T>
DriftReport padding_drift_probe(const Model<T>& model, const std::vector<std::vector<std::int32_t>>& sequences,
                                const std::vector<std::size_t>& pads, const std::vector<std::string>& psm_modes,
                                const std::vector<Representation>& representations = all_representations());

// Per-sequence distances for one (mode, pad, representation) cell, in input order.
template <typename T>
std::vector<double> padding_drift_samples(const Model<T>& model,
                                          const std::vector<std::vector<std::int32_t>>& sequences, std::size_t pad,
                                          const std::string& psm_mode, Representation representation);

enum class BenchPhase { Forward, TrainStep };

std::string bench_phase_name(BenchPhase p);
BenchPhase parse_bench_phase(const std::string& s);

struct ScalingRow {
    std::string pattern;
    std::size_t seq_len = 0;
    std::size_t batch = 0;
    std::string phase;
    double wall_ms = 0;  // median
    std::size_t working_set_bytes = 0;
    std::size_t repeats = 0;
};

struct ScalingReport {
    std::vector<ScalingRow> rows;

    // Columns: pattern, seq_len, batch, phase, wall_ms, working_set_bytes, repeats.
    ReportTable table() const;
};

struct BenchOptions {
    EncoderConfig base;  // pattern and depth are replaced per series
    std::size_t repeats = 20;
    std::size_t warmups = 5;
    std::size_t batch = 1;
    std::uint64_t seed = 0;
    std::string dtype = "f32";
};

// Times each pattern at each length (ascending). Position tables shorter than the
// longest length are stretched by linear interpolation. The working set is the
// tracked-allocator high-water mark above the live size before the timed region.
ScalingReport length_scaling_bench(const std::vector<std::string>& patterns, std::vector<std::size_t> lengths,
                                   BenchPhase phase, const BenchOptions& options);

// Least-squares slope of log(wall_ms) against log(seq_len) for one pattern's rows.
double scaling_slope(const ScalingReport& report, const std::string& pattern, std::size_t min_len = 0);

// Writes CSV or JSON ("csv" | "json") through a temporary file and rename.
void emit_report(const ReportTable& table, const std::string& format, const std::string& path);

}  // namespace mabert
