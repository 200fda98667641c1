#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attribot/context.hpp"
#include "attribot/model.hpp"
#include "attribot/tokens.hpp"

namespace attribot {

struct BackendCapabilities {
    bool kv_sessions = false;
    bool attention_export = false;
    bool embedding_gradients = false;
    bool generation = false;
};

// Token accounting for one likelihood evaluation, caller-token space.
struct EvalCost {
    int64_t uncached_tokens = 0;
    int64_t cached_tokens = 0;
    bool evaluated = false; // false when served from the base memo
};

// A likelihood provider for attribution: log p(R | prompt with some source
// spans removed). The full-context ("base") likelihood is computed once per
// (prompt, response) and shared across methods on the same backend.
class AttributionBackend {
public:
    virtual ~AttributionBackend() = default;

    virtual BackendCapabilities capabilities() const = 0;
    virtual std::string model_id() const = 0;
    virtual std::string tokenizer_id() const = 0;
    virtual int64_t param_count() const = 0;

    // Memoized full-context likelihood. With use_kv the backend also builds
    // (and keeps) the prompt KV cache that later ablated passes fork from.
    virtual double base_loglik(const PromptLayout& layout,
                               const TokenSeq& response, bool use_kv,
                               EvalCost& cost) = 0;

    // One likelihood evaluation on the prompt with the given source spans
    // deleted. Never memoized. With use_kv the pass reuses the cached
    // prefix up to the first removed span.
    virtual double ablated_loglik(const PromptLayout& layout,
                                  const TokenSeq& response,
                                  const std::vector<int>& removed_sorted,
                                  bool use_kv, EvalCost& cost) = 0;

    // Capability-gated accessors; the defaults throw CapabilityError.
    virtual Attentions forward_attentions(const TokenSeq& tokens) const;
    virtual std::vector<std::vector<double>> embedding_gradients(
        const TokenSeq& tokens, Span scored_span) const;
    virtual TokenSeq greedy_generate(const TokenSeq& prompt, int max_new) const;

    // Non-null when backed by the reference model (used by the reference
    // text embedder).
    virtual const RefModel* ref_model() const { return nullptr; }
};

// Backend over the deterministic reference transformer. All capabilities.
class ModelBackend : public AttributionBackend {
public:
    ModelBackend(std::shared_ptr<const ModelWeights> weights,
                 std::string model_id);

    BackendCapabilities capabilities() const override;
    std::string model_id() const override { return model_id_; }
    std::string tokenizer_id() const override { return kByteTokenizerId; }
    int64_t param_count() const override { return model_.param_count(); }

    double base_loglik(const PromptLayout& layout, const TokenSeq& response,
                       bool use_kv, EvalCost& cost) override;
    double ablated_loglik(const PromptLayout& layout, const TokenSeq& response,
                          const std::vector<int>& removed_sorted, bool use_kv,
                          EvalCost& cost) override;

    Attentions forward_attentions(const TokenSeq& tokens) const override;
    std::vector<std::vector<double>> embedding_gradients(
        const TokenSeq& tokens, Span scored_span) const override;
    TokenSeq greedy_generate(const TokenSeq& prompt, int max_new) const override;
    const RefModel* ref_model() const override { return &model_; }

private:
    // Rebuilds the prompt cache when the layout changes; returns tokens
    // processed (0 on a hit).
    int64_t ensure_prompt_session(const TokenSeq& full_prompt);

    RefModel model_;
    std::string model_id_;
    std::optional<Session> prompt_session_;
    TokenSeq session_prompt_;
    std::map<std::pair<TokenSeq, TokenSeq>, double> base_memo_;
};

// Test oracle: an explicit value function v(kept subset) -> log-likelihood
// of R, defined on all subsets of sources. Bit i of the mask is the
// original id of source i (layout.source_ids), so shortened layouts keep
// their meaning. Masks limit it to 32 sources, far above its intended
// desk-scale use. Deterministic.
class SurrogateBackend : public AttributionBackend {
public:
    using ValueFn = std::function<double(uint32_t kept_mask)>;

    SurrogateBackend(ValueFn v, std::string model_id = "surrogate",
                     int64_t params = 1);

    BackendCapabilities capabilities() const override;
    std::string model_id() const override { return model_id_; }
    std::string tokenizer_id() const override { return tokenizer_id_; }
    int64_t param_count() const override { return params_; }

    // Token accounting mirrors the model backend's rules so cost logic can
    // be exercised against the oracle.
    double base_loglik(const PromptLayout& layout, const TokenSeq& response,
                       bool use_kv, EvalCost& cost) override;
    double ablated_loglik(const PromptLayout& layout, const TokenSeq& response,
                          const std::vector<int>& removed_sorted, bool use_kv,
                          EvalCost& cost) override;

    // For rejection tests of proxies with a foreign token-id space.
    void set_tokenizer_id(std::string id) { tokenizer_id_ = std::move(id); }

private:
    ValueFn v_;
    std::string model_id_;
    std::string tokenizer_id_ = kByteTokenizerId;
    int64_t params_ = 1;
    std::map<std::pair<TokenSeq, TokenSeq>, double> base_memo_;
};

// v(S) = base + sum of weights over kept sources; the idealized additive
// world where leave-k-out equals the sum of leave-one-outs.
SurrogateBackend::ValueFn additive_value_fn(std::vector<double> weights,
                                            double base = 0.0);

// Evaluates v on C and C \ {i} directly; brute-force reference for the
// attribution engines.
std::vector<double> brute_force_loo(const SurrogateBackend::ValueFn& v,
                                    int num_sources);

// Kept-subset mask over original source ids for a (possibly shortened)
// layout with the given positions removed.
uint32_t kept_mask_for(const PromptLayout& layout,
                       const std::vector<int>& removed_sorted);

} // namespace attribot
