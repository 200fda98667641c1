#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace attribot {

using Token = int32_t;
using TokenSeq = std::vector<Token>;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by two special
// ids. Byte-level tokenization is concatenation-compatible,
//   tokenize(a) + tokenize(b) == tokenize(a + b),
// which is what keeps ablated prompts bit-identical to the full prompt up to
// the first removed span.
inline constexpr Token kByteVocab = 256;
inline constexpr Token kBosToken = 256;
inline constexpr Token kEosToken = 257;
inline constexpr int kMinVocab = 258; // bytes + BOS + EOS

// Identifier of the token-id space; backends must agree on it before one
// model can score another model's response.
inline constexpr const char* kByteTokenizerId = "byte-v1";

TokenSeq tokenize(const std::string& text);
std::string detokenize(const TokenSeq& tokens);

// Half-open token index range [begin, end).
struct Span {
    int32_t begin = 0;
    int32_t end = 0;

    int32_t size() const { return end - begin; }
    bool contains(int32_t pos) const { return pos >= begin && pos < end; }
    friend bool operator==(const Span&, const Span&) = default;
};

} // namespace attribot
