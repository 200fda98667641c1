#include "attribot/backend.hpp"

#include <algorithm>

#include "attribot/errors.hpp"

namespace attribot {

Attentions AttributionBackend::forward_attentions(const TokenSeq&) const {
    throw CapabilityError("backend '" + model_id() +
                          "' does not export attention maps");
}

std::vector<std::vector<double>> AttributionBackend::embedding_gradients(
    const TokenSeq&, Span) const {
    throw CapabilityError("backend '" + model_id() +
                          "' does not expose embedding gradients");
}

TokenSeq AttributionBackend::greedy_generate(const TokenSeq&, int) const {
    throw CapabilityError("backend '" + model_id() +
                          "' does not support generation");
}

namespace {

// Tail of the ablated prompt after the shared prefix: spans at or after the
// first removed span that are kept, then the suffix.
TokenSeq ablated_tail(const PromptLayout& layout,
                      const std::vector<int>& removed_sorted) {
    TokenSeq tail;
    if (removed_sorted.empty()) return tail;
    int first = removed_sorted.front();
    size_t r = 0;
    for (int i = first; i < layout.num_sources(); ++i) {
        while (r < removed_sorted.size() && removed_sorted[r] < i) ++r;
        if (r < removed_sorted.size() && removed_sorted[r] == i) continue;
        const Span& s = layout.source_spans[i];
        tail.insert(tail.end(), layout.full_prompt.begin() + s.begin,
                    layout.full_prompt.begin() + s.end);
    }
    tail.insert(tail.end(), layout.full_prompt.begin() + layout.suffix.begin,
                layout.full_prompt.begin() + layout.suffix.end);
    return tail;
}

void validate_removed(const PromptLayout& layout,
                      const std::vector<int>& removed_sorted) {
    int prev = -1;
    for (int i : removed_sorted) {
        if (i < 0 || i >= layout.num_sources()) {
            throw Error("removed source index out of range: " +
                        std::to_string(i));
        }
        if (i <= prev) throw Error("removed indices must be sorted and unique");
        prev = i;
    }
}

} // namespace

ModelBackend::ModelBackend(std::shared_ptr<const ModelWeights> weights,
                           std::string model_id)
    : model_(std::move(weights)), model_id_(std::move(model_id)) {}

BackendCapabilities ModelBackend::capabilities() const {
    return BackendCapabilities{true, true, true, true};
}

int64_t ModelBackend::ensure_prompt_session(const TokenSeq& full_prompt) {
    if (prompt_session_ && session_prompt_ == full_prompt) return 0;
    prompt_session_ = model_.session_create(full_prompt);
    session_prompt_ = full_prompt;
    return static_cast<int64_t>(full_prompt.size());
}

double ModelBackend::base_loglik(const PromptLayout& layout,
                                 const TokenSeq& response, bool use_kv,
                                 EvalCost& cost) {
    if (response.empty()) throw Error("base_loglik: empty response");
    auto key = std::make_pair(layout.full_prompt, response);
    auto it = base_memo_.find(key);
    if (it != base_memo_.end()) {
        cost.evaluated = false;
        if (use_kv) {
            // Value is known but later ablated passes still need the cache.
            cost.uncached_tokens += ensure_prompt_session(layout.full_prompt);
        }
        return it->second;
    }

    double loglik;
    if (use_kv) {
        cost.uncached_tokens += ensure_prompt_session(layout.full_prompt);
        Session fork = RefModel::session_fork(*prompt_session_,
                                              prompt_session_->cached_len());
        SessionCost sc;
        loglik = model_.session_score(fork, response, &sc);
        cost.uncached_tokens += sc.uncached_tokens; // response tokens
    } else {
        loglik = model_.score_continuation(layout.full_prompt, response);
        cost.uncached_tokens +=
            static_cast<int64_t>(layout.full_prompt.size() + response.size());
    }
    cost.evaluated = true;
    base_memo_.emplace(std::move(key), loglik);
    return loglik;
}

double ModelBackend::ablated_loglik(const PromptLayout& layout,
                                    const TokenSeq& response,
                                    const std::vector<int>& removed_sorted,
                                    bool use_kv, EvalCost& cost) {
    if (response.empty()) throw Error("ablated_loglik: empty response");
    validate_removed(layout, removed_sorted);
    cost.evaluated = true;

    if (!use_kv) {
        std::set<int> removed(removed_sorted.begin(), removed_sorted.end());
        TokenSeq prompt = ablate_prompt(layout, removed);
        cost.uncached_tokens +=
            static_cast<int64_t>(prompt.size() + response.size());
        return model_.score_continuation(prompt, response);
    }

    cost.uncached_tokens += ensure_prompt_session(layout.full_prompt);
    int32_t shared = shared_prefix_len(layout, removed_sorted);
    Session fork = RefModel::session_fork(*prompt_session_, shared);
    SessionCost ext, sco;
    model_.session_extend(fork, ablated_tail(layout, removed_sorted), &ext);
    double loglik = model_.session_score(fork, response, &sco);
    // session_score re-feeds one cached token when the fork landed exactly
    // at the cache end with no tail; that token moves from cached to
    // uncached.
    int64_t refeed =
        sco.uncached_tokens - static_cast<int64_t>(response.size());
    cost.uncached_tokens += ext.uncached_tokens + sco.uncached_tokens;
    cost.cached_tokens += shared - refeed;
    return loglik;
}

Attentions ModelBackend::forward_attentions(const TokenSeq& tokens) const {
    return model_.forward_attentions(tokens);
}

std::vector<std::vector<double>> ModelBackend::embedding_gradients(
    const TokenSeq& tokens, Span scored_span) const {
    return model_.embedding_gradients(tokens, scored_span);
}

TokenSeq ModelBackend::greedy_generate(const TokenSeq& prompt,
                                       int max_new) const {
    return model_.greedy_generate(prompt, max_new);
}

SurrogateBackend::SurrogateBackend(ValueFn v, std::string model_id,
                                   int64_t params)
    : v_(std::move(v)), model_id_(std::move(model_id)), params_(params) {}

BackendCapabilities SurrogateBackend::capabilities() const {
    // KV sessions are "supported" in the sense that prefix-reuse accounting
    // is modeled; there is no transformer underneath.
    return BackendCapabilities{true, false, false, false};
}

double SurrogateBackend::base_loglik(const PromptLayout& layout,
                                     const TokenSeq& response, bool use_kv,
                                     EvalCost& cost) {
    auto key = std::make_pair(layout.full_prompt, response);
    auto it = base_memo_.find(key);
    if (it != base_memo_.end()) {
        cost.evaluated = false;
        return it->second;
    }
    (void)use_kv; // the oracle has no cache to build
    cost.uncached_tokens +=
        static_cast<int64_t>(layout.full_prompt.size() + response.size());
    cost.evaluated = true;
    double value = v_(kept_mask_for(layout, {}));
    base_memo_.emplace(std::move(key), value);
    return value;
}

double SurrogateBackend::ablated_loglik(const PromptLayout& layout,
                                        const TokenSeq& response,
                                        const std::vector<int>& removed_sorted,
                                        bool use_kv, EvalCost& cost) {
    validate_removed(layout, removed_sorted);
    cost.evaluated = true;

    int64_t prompt_len = static_cast<int64_t>(layout.full_prompt.size());
    for (int i : removed_sorted) prompt_len -= layout.source_spans[i].size();
    int64_t total = prompt_len + static_cast<int64_t>(response.size());
    if (use_kv) {
        int64_t shared = shared_prefix_len(layout, removed_sorted);
        cost.cached_tokens += shared;
        cost.uncached_tokens += total - shared;
    } else {
        cost.uncached_tokens += total;
    }
    return v_(kept_mask_for(layout, removed_sorted));
}

uint32_t kept_mask_for(const PromptLayout& layout,
                       const std::vector<int>& removed_sorted) {
    if (layout.source_ids.size() != size_t(layout.num_sources())) {
        throw Error("layout lacks source ids");
    }
    uint32_t mask = 0;
    size_t r = 0;
    for (int i = 0; i < layout.num_sources(); ++i) {
        while (r < removed_sorted.size() && removed_sorted[r] < i) ++r;
        if (r < removed_sorted.size() && removed_sorted[r] == i) continue;
        int id = layout.source_ids[i];
        if (id < 0 || id >= 32) {
            throw Error("surrogate backend supports at most 32 sources");
        }
        mask |= 1u << id;
    }
    return mask;
}

SurrogateBackend::ValueFn additive_value_fn(std::vector<double> weights,
                                            double base) {
    return [weights = std::move(weights), base](uint32_t kept_mask) {
        double v = base;
        for (size_t i = 0; i < weights.size(); ++i) {
            if (kept_mask & (1u << i)) v += weights[i];
        }
        return v;
    };
}

std::vector<double> brute_force_loo(const SurrogateBackend::ValueFn& v,
                                    int num_sources) {
    uint32_t full = num_sources == 32 ? 0xffffffffu
                                      : ((1u << num_sources) - 1u);
    double base = v(full);
    std::vector<double> scores(num_sources);
    for (int i = 0; i < num_sources; ++i) {
        scores[i] = base - v(full & ~(1u << i));
    }
    return scores;
}

} // namespace attribot
