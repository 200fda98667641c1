#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attribot/backend.hpp"
#include "attribot/context.hpp"

namespace attribot {

// Cost of one attribution stage. Token counts are caller-token space; the
// full-context base likelihood is tracked separately because it is computed
// once while producing the response and shared across methods, so it is not
// billed to any single attribution method. Counts are doubles so that the
// idealized pass-by-pass cost simulator can share the type; engine-produced
// records always hold integers.
struct StageCost {
    std::string stage;            // "loo", "kv", "group", "proxy", ...
    std::string model_id;
    double model_params = 0;
    double passes = 0;            // likelihood evaluations, base excluded
    double base_passes = 0;       // full-context likelihood computations
    double uncached_tokens = 0;   // processed tokens across those passes
    double cached_tokens = 0;     // tokens reused from a prefix cache
    double base_uncached_tokens = 0;
    double flops_factor = 2.0;    // FLOPs per (parameter * uncached token)
};

struct CostRecord {
    std::vector<StageCost> stages;
    int64_t wall_ns = 0;

    double passes() const;
    double base_passes() const;
    double uncached_tokens() const;
    double cached_tokens() const;
    double base_uncached_tokens() const;
};

// Per-source attribution scores aligned with the layout's source order;
// higher score = more contributive.
struct AttributionScores {
    std::vector<double> scores;
    std::string method;
    nlohmann::json params = nlohmann::json::object();
    CostRecord cost;
};

// Exact leave-one-out: score_i = log p(R|Q,C) - log p(R|Q,C \ {s_i}).
// |C| ablation passes plus the shared base evaluation; every token is
// processed uncached.
AttributionScores loo_exact(AttributionBackend& backend,
                            const PromptLayout& layout,
                            const TokenSeq& response);

// Leave-one-out with KV reuse: pass i reuses the cached preamble and spans
// 1..i-1. Scores match loo_exact within numerical tolerance.
AttributionScores loo_kv(AttributionBackend& backend,
                         const PromptLayout& layout,
                         const TokenSeq& response);

struct GroupAttribution {
    std::vector<double> scores; // one per group
    CostRecord cost;
};

// Leave-group-out: score of a group is the drop in response log-likelihood
// when all of its sources are removed at once. `grouping` must partition
// the source indices. use_kv defaults to the backend's capability.
GroupAttribution leave_group_out(AttributionBackend& backend,
                                 const PromptLayout& layout,
                                 const TokenSeq& response,
                                 const std::vector<std::vector<int>>& grouping,
                                 std::optional<bool> use_kv = std::nullopt);

} // namespace attribot
