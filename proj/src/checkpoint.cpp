#include "mabert/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace mabert {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename U>
void put(std::vector<char>& out, U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
}

template <typename U>
U take(const std::vector<char>& in, std::size_t& pos) {
    if (pos + sizeof(U) > in.size()) throw CheckpointError("checkpoint truncated in preamble");
    U v;
    std::memcpy(&v, in.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
}

std::size_t dtype_size(DType d) { return d == DType::Float32 ? 4 : 8; }

}  // namespace

nlohmann::json Checkpoint::manifest() const {
    nlohmann::json m = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        m.push_back({{"name", t.name},
                     {"shape", t.shape},
                     {"dtype", std::string(dtype_name(t.dtype))},
                     {"offset", offset},
                     {"nbytes", t.bytes.size()}});
        offset += t.bytes.size();
    }
    return m;
}

std::vector<char> Checkpoint::serialize() const {
    nlohmann::json header = {
        {"format_version", kCheckpointVersion}, {"config", config}, {"step", step}, {"manifest", manifest()}};
    const std::string h = header.dump();
    std::vector<char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put(out, kCheckpointVersion);
    put(out, static_cast<std::uint64_t>(h.size()));
    out.insert(out.end(), h.begin(), h.end());
    for (const auto& t : tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
    return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<char>& data) {
    if (data.size() < sizeof(kCheckpointMagic) || std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic))) {
        throw CheckpointError("not a checkpoint (bad magic)");
    }
    std::size_t pos = sizeof(kCheckpointMagic);
    const auto version = take<std::uint32_t>(data, pos);
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto hlen = take<std::uint64_t>(data, pos);
    if (hlen > data.size() - pos) throw CheckpointError("checkpoint truncated in header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(data.begin() + static_cast<std::ptrdiff_t>(pos),
                                       data.begin() + static_cast<std::ptrdiff_t>(pos + hlen));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    pos += hlen;
    Checkpoint ck;
    try {
        if (header.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
            throw CheckpointError("header format_version does not match preamble");
        }
        ck.config = header.at("config");
        ck.step = header.at("step").get<std::uint64_t>();
        const std::size_t body = data.size() - pos;
        std::uint64_t expected = 0;
        for (const auto& e : header.at("manifest")) {
            CheckpointTensor t;
            t.name = e.at("name").get<std::string>();
            t.shape = e.at("shape").get<Shape>();
            t.dtype = parse_dtype(e.at("dtype").get<std::string>());
            const auto offset = e.at("offset").get<std::uint64_t>();
            const auto nbytes = e.at("nbytes").get<std::uint64_t>();
            if (offset != expected || nbytes != numel(t.shape) * dtype_size(t.dtype)) {
                throw CheckpointError("manifest entry '" + t.name + "' has inconsistent offset or size");
            }
            if (offset + nbytes > body) throw CheckpointError("tensor '" + t.name + "' extends past end of file");
            const char* src = data.data() + pos + offset;
            t.bytes.assign(src, src + nbytes);
            expected += nbytes;
            ck.tensors.push_back(std::move(t));
        }
        if (expected != body) throw CheckpointError("checkpoint has trailing bytes after the last tensor");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    return ck;
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, std::uint64_t step) {
    Checkpoint ck;
    ck.config = model.config.to_json();
    ck.step = step;
    for (const auto& e : model.params.entries()) {
        CheckpointTensor t;
        t.name = e.name;
        t.shape = e.var.shape();
        t.dtype = dtype_of<T>();
        const auto* p = reinterpret_cast<const char*>(e.var.value().data());
        t.bytes.assign(p, p + e.var.numel() * sizeof(T));
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
    EncoderConfig cfg;
    try {
        cfg = EncoderConfig::from_json(ck.config);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint config unreadable: ") + e.what());
    }
    Model<T> model(cfg, 0);
    if (ck.tensors.size() != model.params.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                              std::to_string(model.params.size()));
    }
    for (const auto& t : ck.tensors) {
        if (!model.params.contains(t.name)) throw CheckpointError("unexpected tensor '" + t.name + "'");
        if (t.dtype != dtype_of<T>()) {
            throw CheckpointError("tensor '" + t.name + "' stored as " + std::string(dtype_name(t.dtype)) +
                                  ", requested " + std::string(dtype_name(dtype_of<T>())));
        }
        Var<T>& v = model.params.get(t.name);
        if (v.shape() != t.shape) {
            throw CheckpointError("tensor '" + t.name + "' has shape " + shape_str(t.shape) + ", model expects " +
                                  shape_str(v.shape()));
        }
        std::memcpy(v.mutable_value().data(), t.bytes.data(), t.bytes.size());
    }
    return model;
}

template <typename T>
std::size_t load_matching_parameters(Model<T>& model, const Checkpoint& ck) {
    std::size_t copied = 0;
    for (const auto& t : ck.tensors) {
        if (!model.params.contains(t.name) || t.dtype != dtype_of<T>()) continue;
        Var<T>& v = model.params.get(t.name);
        if (v.shape() != t.shape) continue;
        std::memcpy(v.mutable_value().data(), t.bytes.data(), t.bytes.size());
        ++copied;
    }
    return copied;
}

void write_file_atomic(const std::string& path, const std::string& data) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) throw std::runtime_error("write to '" + tmp + "' failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw std::runtime_error("cannot replace '" + path + "'");
    }
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const std::vector<char> bytes = ck.serialize();
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Checkpoint::deserialize(data);
}

template Checkpoint make_checkpoint(const Model<float>&, std::uint64_t);
template Checkpoint make_checkpoint(const Model<double>&, std::uint64_t);
template Model<float> model_from_checkpoint(const Checkpoint&);
template Model<double> model_from_checkpoint(const Checkpoint&);
template std::size_t load_matching_parameters(Model<float>&, const Checkpoint&);
template std::size_t load_matching_parameters(Model<double>&, const Checkpoint&);

}  // namespace mabert
