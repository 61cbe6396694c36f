#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mabert/batch.hpp"

namespace mabert {

class Vocabulary {
public:
    // Reserved tokens only.
    Vocabulary();
    // Reserved tokens followed by the most frequent words of `lines` (ties broken
    // alphabetically) until `size` entries exist.
    static Vocabulary build(const std::vector<std::string>& lines, std::size_t size);
    // Reserved tokens followed by "w5", "w6", ... up to `size` entries.
    static Vocabulary synthetic(std::size_t size);

    std::int32_t id(const std::string& word) const;
    const std::string& word(std::int32_t id) const;
    std::size_t size() const { return words_.size(); }
    std::int32_t add(const std::string& word);

    // Whitespace split; unknown words map to UNK.
    std::vector<std::int32_t> encode(const std::string& line) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::int32_t> index_;
};

// Sequences of content ids (no CLS/SEP); make_batch adds those.
using Corpus = std::vector<std::vector<std::int32_t>>;

struct CorpusSpec {
    std::string kind = "copy-grammar";  // copy-grammar | bigram
    std::size_t V = 1024;
    std::size_t count = 4096;
    std::size_t min_len = 8;  // content tokens, inclusive
    std::size_t max_len = 32;
    std::size_t offset = 2;   // copy-grammar period
    std::uint64_t seed = 0;
};

// copy-grammar: the first `offset` tokens are random and every later token repeats
// the token `offset` positions earlier. bigram: a fixed random sparse Markov chain.
// Lengths are uniform on [min_len, max_len].
Corpus synthetic_corpus(const CorpusSpec& spec);

// One sequence per line, either whitespace words (encoded with `vocab`) or, when every
// field is an integer, pre-encoded ids.
Corpus read_corpus(const std::string& path, const Vocabulary& vocab);
void write_corpus(const std::string& path, const Corpus& corpus);

struct MaskingConfig {
    double probability = 0.15;
    double mask_fraction = 0.8;
    double random_fraction = 0.1;
    double keep_fraction = 0.1;
};

struct MaskingStats {
    std::size_t eligible = 0;
    std::size_t selected = 0;
    std::size_t to_mask = 0;
    std::size_t to_random = 0;
    std::size_t kept = 0;
};

// Corrupts batch.ids in place and fills batch.labels. PAD/CLS/SEP (and any masked-out
// position) are never selected; random replacements are drawn from non-reserved ids.
MaskingStats mlm_mask_batch(BatchEncoding& batch, std::mt19937_64& rng, std::size_t V,
                            const MaskingConfig& cfg = {});

}  // namespace mabert
