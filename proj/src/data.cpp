#include "mabert/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "mabert/errors.hpp"
#include "mabert/rng.hpp"

namespace mabert {

namespace {

const char* const kReservedWords[] = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};

std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream in(line);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

bool parse_int(const std::string& s, std::int32_t& v) {
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    return ec == std::errc() && ptr == end;
}

}  // namespace

Vocabulary::Vocabulary() {
    for (const char* w : kReservedWords) add(w);
}

std::int32_t Vocabulary::add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(words_.size());
    words_.push_back(word);
    index_.emplace(word, id);
    return id;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& lines, std::size_t size) {
    std::map<std::string, std::size_t> counts;
    for (const auto& line : lines) {
        for (const auto& w : split_ws(line)) ++counts[w];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [w, n] : ranked) {
        if (v.size() >= size) break;
        v.add(w);
    }
    return v;
}

Vocabulary Vocabulary::synthetic(std::size_t size) {
    Vocabulary v;
    for (std::size_t i = v.size(); i < size; ++i) v.add("w" + std::to_string(i));
    return v;
}

std::int32_t Vocabulary::id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
        throw VocabularyError("id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(words_.size()));
    }
    return words_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocabulary::encode(const std::string& line) const {
    std::vector<std::int32_t> out;
    for (const auto& w : split_ws(line)) out.push_back(id(w));
    return out;
}

Corpus synthetic_corpus(const CorpusSpec& spec) {
    if (spec.V <= 16) throw ConfigError("synthetic corpus needs V > 16, got " + std::to_string(spec.V));
    if (spec.min_len == 0 || spec.min_len > spec.max_len) {
        throw ConfigError("synthetic corpus length range [" + std::to_string(spec.min_len) + ", " +
                          std::to_string(spec.max_len) + "] is invalid");
    }
    const auto lo = kNumReserved;
    const auto hi = static_cast<std::int32_t>(spec.V) - 1;
    std::mt19937_64 rng = keyed_engine(spec.seed, "corpus");
    std::uniform_int_distribution<std::int32_t> token(lo, hi);
    std::uniform_int_distribution<std::size_t> length(spec.min_len, spec.max_len);
    Corpus corpus;
    corpus.reserve(spec.count);
    if (spec.kind == "copy-grammar") {
        if (spec.offset == 0) throw ConfigError("copy-grammar offset must be >= 1");
        for (std::size_t i = 0; i < spec.count; ++i) {
            std::vector<std::int32_t> seq(length(rng));
            for (std::size_t t = 0; t < seq.size(); ++t) seq[t] = t < spec.offset ? token(rng) : seq[t - spec.offset];
            corpus.push_back(std::move(seq));
        }
    } else if (spec.kind == "bigram") {
        constexpr std::size_t kBranching = 4;
        std::mt19937_64 chain_rng = keyed_engine(spec.seed, "bigram-chain");
        std::vector<std::array<std::int32_t, kBranching>> next(spec.V);
        for (auto& row : next) {
            for (auto& t : row) t = token(chain_rng);
        }
        std::discrete_distribution<std::size_t> branch({0.55, 0.25, 0.15, 0.05});
        for (std::size_t i = 0; i < spec.count; ++i) {
            std::vector<std::int32_t> seq(length(rng));
            seq[0] = token(rng);
            for (std::size_t t = 1; t < seq.size(); ++t) seq[t] = next[static_cast<std::size_t>(seq[t - 1])][branch(rng)];
            corpus.push_back(std::move(seq));
        }
    } else {
        throw ConfigError("unknown corpus kind '" + spec.kind + "' (expected copy-grammar or bigram)");
    }
    return corpus;
}

Corpus read_corpus(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file '" + path + "'");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!split_ws(line).empty()) lines.push_back(line);
    }
    if (lines.empty()) throw ConfigError("corpus file '" + path + "' has no sequences");
    bool numeric = true;
    for (const auto& line : lines) {
        for (const auto& w : split_ws(line)) {
            std::int32_t v;
            numeric = numeric && parse_int(w, v);
        }
    }
    Corpus corpus;
    for (const auto& line : lines) {
        if (!numeric) {
            corpus.push_back(vocab.encode(line));
            continue;
        }
        std::vector<std::int32_t> seq;
        for (const auto& w : split_ws(line)) {
            std::int32_t v = 0;
            parse_int(w, v);
            seq.push_back(v);
        }
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

void write_corpus(const std::string& path, const Corpus& corpus) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write corpus file '" + path + "'");
    for (const auto& seq : corpus) {
        for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
        out << '\n';
    }
}

MaskingStats mlm_mask_batch(BatchEncoding& batch, std::mt19937_64& rng, std::size_t V, const MaskingConfig& cfg) {
    const double split = cfg.mask_fraction + cfg.random_fraction + cfg.keep_fraction;
    if (std::abs(split - 1.0) > 1e-9 || cfg.mask_fraction < 0 || cfg.random_fraction < 0 || cfg.keep_fraction < 0) {
        throw ConfigError("masking split must be non-negative and sum to 1");
    }
    if (!(cfg.probability >= 0.0 && cfg.probability <= 1.0)) throw ConfigError("masking probability must lie in [0, 1]");
    if (V <= static_cast<std::size_t>(kNumReserved)) throw ConfigError("vocabulary has no non-reserved ids");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::int32_t> random_id(kNumReserved, static_cast<std::int32_t>(V) - 1);
    batch.labels.assign(batch.ids.size(), -1);
    MaskingStats stats;
    for (std::size_t i = 0; i < batch.ids.size(); ++i) {
        const std::int32_t id = batch.ids[i];
        if (!batch.mask[i] || id == kPad || id == kCls || id == kSep) continue;
        ++stats.eligible;
        if (unit(rng) >= cfg.probability) continue;
        ++stats.selected;
        batch.labels[i] = id;
        const double r = unit(rng);
        if (r < cfg.mask_fraction) {
            batch.ids[i] = kMask;
            ++stats.to_mask;
        } else if (r < cfg.mask_fraction + cfg.random_fraction) {
            batch.ids[i] = random_id(rng);
            ++stats.to_random;
        } else {
            ++stats.kept;
        }
    }
    return stats;
}

}  // namespace mabert
