#pragma once

#include <optional>
#include <string>
#include <vector>

#include "attribot/attribution.hpp"

namespace attribot {

struct HierParams {
    double beta = 0.5; // fraction of groups kept, (0, 1]
    int min_keep = 1;  // minimum groups kept

    // kept = clamp(max(min_keep, ceil(beta * M)), 1, M)
    int kept_count(int num_groups) const;
    void validate() const;
};

struct PruneParams {
    double alpha = 0.5; // fraction of sources kept, (0, 1]
    int min_keep = 1;   // minimum sources kept

    int kept_count(int num_sources) const;
    void validate() const;
};

// Two-stage attribution: leave-group-out over all groups, keep the top
// groups (ties break toward the earlier group), then leave-one-out over the
// sources of the shortened context rebuilt from the retained groups in
// original order. Sources of dropped groups receive sentinel scores
// strictly below the minimum retained score, ordered among themselves by
// their group's stage-1 score.
AttributionScores hierarchical(AttributionBackend& backend,
                               const PromptLayout& layout,
                               const TokenSeq& response,
                               const HierParams& params,
                               std::optional<bool> use_kv = std::nullopt);

// Leave-one-out under a proxy model, scoring the target model's response.
// The proxy must share the layout's token-id space.
AttributionScores proxy_attribute(AttributionBackend& proxy_backend,
                                  const PromptLayout& layout,
                                  const TokenSeq& target_response,
                                  std::optional<bool> use_kv = std::nullopt);

// Proxy scores every source on the full context; the target re-scores only
// the top alpha fraction on a context rebuilt from the retained sources in
// original order. Pruned sources receive sentinel scores below all retained
// scores, ordered by their proxy score.
AttributionScores proxy_prune(AttributionBackend& target_backend,
                              AttributionBackend& proxy_backend,
                              const PromptLayout& layout,
                              const TokenSeq& response,
                              const PruneParams& params,
                              std::optional<bool> use_kv = std::nullopt);

// Declarative composition of the acceleration stages. Stage names:
// "kv", "proxy", "prune", "hierarchical". Execution is canonical regardless
// of list order: the selection phase (hierarchical when present, plain LOO
// otherwise) runs on the proxy when a proxy/prune stage is present, target
// re-scoring (prune) runs last, and KV reuse is applied wherever the
// executing backend supports it.
struct PipelineSpec {
    std::vector<std::string> stages;
    HierParams hier;
    PruneParams prune;

    bool has(const std::string& stage) const;
    void validate(bool have_proxy) const;
    nlohmann::json to_json() const;
    static PipelineSpec from_json(const nlohmann::json& j);
};

AttributionScores run_pipeline(const PipelineSpec& spec,
                               AttributionBackend& target_backend,
                               AttributionBackend* proxy_backend,
                               const PromptLayout& layout,
                               const TokenSeq& response);

// Sentinel scores for unretained sources: a descending ladder strictly
// below `floor`, assigned in the given priority order (rank 0 highest).
std::vector<double> sentinel_ladder(double floor_score, int count);

} // namespace attribot
