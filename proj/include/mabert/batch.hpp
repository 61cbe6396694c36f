#pragma once

#include <cstdint>
#include <vector>

#include "mabert/tensor.hpp"

namespace mabert {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kCls = 1;
inline constexpr std::int32_t kSep = 2;
inline constexpr std::int32_t kMask = 3;
inline constexpr std::int32_t kUnk = 4;
inline constexpr std::int32_t kNumReserved = 5;

// Row-major [B, T] token ids with an end-padded 0/1 mask. `labels` is empty or
// holds the MLM targets (-1 where unlabeled).
struct BatchEncoding {
    std::size_t B = 0;
    std::size_t T = 0;
    std::vector<std::int32_t> ids;
    std::vector<std::uint8_t> mask;
    std::vector<std::int32_t> labels;

    std::size_t length(std::size_t b) const {
        std::size_t n = 0;
        for (std::size_t t = 0; t < T; ++t) n += mask[b * T + t];
        return n;
    }

    template <typename S>
    Tensor<S> mask_tensor() const {
        Tensor<S> m(Shape{B, T});
        for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] ? S(1) : S(0);
        return m;
    }
};

// [CLS] tokens... [SEP] per sequence, padded with PAD to the longest row plus `extra_pad`.
inline BatchEncoding make_batch(const std::vector<std::vector<std::int32_t>>& tokens, std::size_t extra_pad = 0,
                                bool add_special = true) {
    BatchEncoding out;
    out.B = tokens.size();
    std::size_t longest = 0;
    for (const auto& s : tokens) longest = std::max(longest, s.size() + (add_special ? 2 : 0));
    out.T = longest + extra_pad;
    out.ids.assign(out.B * out.T, kPad);
    out.mask.assign(out.B * out.T, 0);
    for (std::size_t b = 0; b < out.B; ++b) {
        std::size_t t = 0;
        auto put = [&](std::int32_t id) {
            out.ids[b * out.T + t] = id;
            out.mask[b * out.T + t] = 1;
            ++t;
        };
        if (add_special) put(kCls);
        for (auto id : tokens[b]) put(id);
        if (add_special) put(kSep);
    }
    return out;
}

}  // namespace mabert
