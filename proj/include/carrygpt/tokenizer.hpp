#pragma once

#include <string>
#include <vector>

#include "carrygpt/common.hpp"

namespace carrygpt {

// Byte-level vocabulary: ids 0..255 are raw bytes, plus BOS/EOS specials.
inline constexpr int kByteVocab = 256;
inline constexpr int kBosId = 256;
inline constexpr int kEosId = 257;
inline constexpr int kVocabSize = 258;

struct TokenSequence {
    std::vector<int> ids;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }

    void validate(int vocab_size, int max_seq) const {
        if (ids.empty()) throw DataError("token sequence is empty");
        if (max_seq > 0 && static_cast<int>(ids.size()) > max_seq)
            throw DataError("token sequence length " + std::to_string(ids.size()) + " exceeds max " +
                            std::to_string(max_seq));
        for (int id : ids)
            if (id < 0 || id >= vocab_size)
                throw DataError("token id " + std::to_string(id) + " outside vocab " + std::to_string(vocab_size));
    }

    // Input/target split for next-token prediction: inputs are ids[0..n-2],
    // targets are ids[1..n-1].
    TokenSequence inputs() const {
        if (ids.size() < 2) throw DataError("sequence too short for next-token split");
        return TokenSequence{std::vector<int>(ids.begin(), ids.end() - 1)};
    }
    std::vector<int> targets() const {
        if (ids.size() < 2) throw DataError("sequence too short for next-token split");
        return std::vector<int>(ids.begin() + 1, ids.end());
    }
};

inline std::vector<int> encode_bytes(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int>(c));
    return out;
}

inline TokenSequence encode_prompt(const std::string& text) {
    TokenSequence s;
    s.ids.push_back(kBosId);
    for (unsigned char c : text) s.ids.push_back(static_cast<int>(c));
    return s;
}

// Decodes byte tokens; specials are dropped.
inline std::string decode_bytes(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids)
        if (id >= 0 && id < kByteVocab) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    return out;
}

} // namespace carrygpt
