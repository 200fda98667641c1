#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "attribot/tokens.hpp"

namespace attribot {

// Reference decoder-only transformer: pre-norm, learned positional
// embeddings, tied input/output embeddings, GELU feed-forward, no biases on
// linear projections. Weights are stored as 32-bit floats (the on-disk
// format); arithmetic runs in double so that finite-difference gradient
// checks and cached-vs-uncached score comparisons are not dominated by
// accumulation noise.
//
// A BOS token is prepended internally to every sequence, so position 0 is
// always BOS and a model with max_seq positions holds at most max_seq - 1
// caller tokens. The output distribution ranges over the 256 byte tokens
// only; specials and any extra vocab slots are masked from the softmax.
struct ModelConfig {
    int32_t layers = 2;
    int32_t heads = 2;
    int32_t d_model = 8;
    int32_t d_ff = 16;
    int32_t vocab = kMinVocab;
    int32_t max_seq = 256;

    void validate() const; // throws on d_model % heads != 0, vocab < 258, ...
    int32_t head_dim() const { return d_model / heads; }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    std::vector<float> ln1_g, ln1_b;   // d
    std::vector<float> wq, wk, wv, wo; // d*d, row-major [out][in]
    std::vector<float> ln2_g, ln2_b;   // d
    std::vector<float> w1;             // d_ff*d
    std::vector<float> w2;             // d*d_ff
};

struct ModelWeights {
    ModelConfig config;
    std::vector<float> embedding; // vocab * d, tied with the output head
    std::vector<float> pos;       // max_seq * d
    std::vector<LayerWeights> layers;
    std::vector<float> lnf_g, lnf_b; // d

    int64_t param_count() const;
};

// Deterministic function of (config, seed): same inputs give bit-identical
// weights on every platform (hand-rolled uniform + Box-Muller over a
// standard-specified mt19937_64 stream).
ModelWeights init_reference_model(const ModelConfig& config, uint64_t seed);

// All-zero weights: uniform output distribution, uniform attention rows,
// zero gradients. Used as a fixed point in tests.
ModelWeights init_zero_model(const ModelConfig& config);

// Model file: magic "ABOT1", six little-endian int32 config fields
// (layers, heads, d_model, d_ff, vocab, max_seq), then the raw
// little-endian float32 arrays in this order: embedding, pos, then per
// layer ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2, then
// lnf_g, lnf_b.
void save_model(const ModelWeights& weights, const std::string& path);
ModelWeights load_model(const std::string& path);

// Per-layer KV cache over BOS + a token prefix. Forking truncates the
// cache without recomputation; the forked copy is independent of its
// parent. A session is single-user: do not extend one session from two
// threads. Many sessions may coexist per model.
class Session {
public:
    // Caller tokens covered by the cache (the internal BOS is not counted).
    int64_t cached_len() const { return static_cast<int64_t>(prefix_.size()); }
    const TokenSeq& prefix() const { return prefix_; }

private:
    friend class RefModel;
    std::vector<std::vector<double>> k_, v_; // [layer][pos * d_model]
    TokenSeq prefix_;
    std::vector<double> next_logprobs_; // log p(next | cache); empty after fork
};

// Token counts for one session operation, in caller-token space.
struct SessionCost {
    int64_t uncached_tokens = 0;
    int64_t cached_tokens = 0;
};

struct Attentions {
    // maps[layer][head] is row-major [seq][seq] over internal positions
    // (position 0 is BOS); rows are softmax distributions over positions
    // <= the row's own, zero above the diagonal.
    std::vector<std::vector<std::vector<double>>> maps;
    int64_t seq_len = 0;
};

class RefModel {
public:
    explicit RefModel(std::shared_ptr<const ModelWeights> weights);

    const ModelConfig& config() const { return weights_->config; }
    const ModelWeights& weights() const { return *weights_; }
    int64_t param_count() const { return weights_->param_count(); }

    // Sum over continuation tokens of log p(tok_t | prefix, tok_<t).
    // Causal: independent of anything after the scored token.
    double score_continuation(const TokenSeq& prefix,
                              const TokenSeq& continuation) const;

    // log p(next token = v | prefix) for every vocab id; masked ids get
    // -infinity. exp of the byte entries sums to 1.
    std::vector<double> next_token_logprobs(const TokenSeq& prefix) const;

    Session session_create(const TokenSeq& prefix) const;
    static Session session_fork(const Session& session, int64_t position);
    // Appends tokens to the session prefix, computing their K/V.
    void session_extend(Session& session, const TokenSeq& tokens,
                        SessionCost* cost = nullptr) const;
    // Scores the continuation against the session's full prefix, extending
    // the cache over it. Equals score_continuation(prefix, continuation).
    double session_score(Session& session, const TokenSeq& continuation,
                         SessionCost* cost = nullptr) const;

    Attentions forward_attentions(const TokenSeq& tokens) const;

    // Gradient of the summed log-probability of the tokens in scored_span
    // (caller-token indices) with respect to each caller token's input
    // embedding. Result: one d_model vector per caller token.
    std::vector<std::vector<double>> embedding_gradients(const TokenSeq& tokens,
                                                         Span scored_span) const;

    // Same forward pass but with the embedding of one position overridden;
    // test hook for finite-difference gradient checks. `position` is a
    // caller-token index.
    double score_span_with_embedding_bump(const TokenSeq& tokens, Span scored_span,
                                          int32_t position, int32_t coord,
                                          double delta) const;

    // Deterministic argmax decoding over byte tokens; ties break toward the
    // lowest id; stops at EOS or after max_new tokens.
    TokenSeq greedy_generate(const TokenSeq& prompt, int max_new) const;

private:
    std::shared_ptr<const ModelWeights> weights_;
};

} // namespace attribot
