#include "attribot/tokens.hpp"

#include "attribot/errors.hpp"

namespace attribot {

TokenSeq tokenize(const std::string& text) {
    TokenSeq out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(static_cast<Token>(c));
    }
    return out;
}

std::string detokenize(const TokenSeq& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (t < 0 || t >= kByteVocab) {
            if (t == kBosToken || t == kEosToken) {
                continue; // specials carry no text
            }
            throw Error("detokenize: token id " + std::to_string(t) +
                        " is not a byte token");
        }
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

} // namespace attribot
