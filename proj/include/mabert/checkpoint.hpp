#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabert/encoder.hpp"

namespace mabert {

inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'B', 'E', 'R', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    DType dtype = DType::Float32;
    std::vector<char> bytes;  // little-endian element data
};

// Layout: 8-byte magic, u32 version, u64 header length, header JSON, tensor data.
// Header keys: format_version, config, step, manifest[{name, shape, dtype, offset, nbytes}].
struct Checkpoint {
    nlohmann::json config;
    std::uint64_t step = 0;
    std::vector<CheckpointTensor> tensors;

    nlohmann::json manifest() const;
    std::vector<char> serialize() const;
    static Checkpoint deserialize(const std::vector<char>& data);
};

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, std::uint64_t step);

// Builds a model from the stored config and overwrites every parameter. The stored
// dtype must match T.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck);

// Copies every stored tensor whose name and shape match a parameter of `model`;
// returns the number copied.
template <typename T>
std::size_t load_matching_parameters(Model<T>& model, const Checkpoint& ck);

// Writes to a sibling temporary file and renames it over `path`.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Writes `data` to `path` through a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& data);

}  // namespace mabert
