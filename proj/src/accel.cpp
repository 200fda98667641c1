#include "attribot/accel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "attribot/errors.hpp"

namespace attribot {

namespace {

using Clock = std::chrono::steady_clock;

int64_t elapsed_ns(Clock::time_point start) {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() -
                                                                start)
        .count();
}

int clamp_kept(double fraction, int min_keep, int total) {
    int kept = static_cast<int>(std::ceil(fraction * total));
    kept = std::max(kept, min_keep);
    return std::clamp(kept, 1, total);
}

// Indices of the `kept` highest scores; ties break toward the earlier index.
std::vector<int> top_k_indices(const std::vector<double>& scores, int kept) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[a] > scores[b];
    });
    order.resize(kept);
    return order;
}

void check_tokenizer(const AttributionBackend& backend,
                     const PromptLayout& layout) {
    if (backend.tokenizer_id() != layout.tokenizer_id) {
        throw TokenizerMismatchError(
            "backend '" + backend.model_id() + "' uses tokenizer '" +
            backend.tokenizer_id() + "' but the layout was built with '" +
            layout.tokenizer_id + "'");
    }
}

void append_stages(CostRecord& into, const CostRecord& from) {
    into.stages.insert(into.stages.end(), from.stages.begin(),
                       from.stages.end());
}

AttributionScores loo_auto(AttributionBackend& backend,
                           const PromptLayout& layout,
                           const TokenSeq& response, bool use_kv) {
    return use_kv && backend.capabilities().kv_sessions
               ? loo_kv(backend, layout, response)
               : loo_exact(backend, layout, response);
}

// Shared tail of proxy_prune and pipeline prune stages: keep the top
// sources of `selection_scores`, re-score them with the target on a
// shortened context, and park the rest on a sentinel ladder ordered by
// their selection score.
AttributionScores prune_rescore(AttributionBackend& target_backend,
                                const std::vector<double>& selection_scores,
                                CostRecord selection_cost,
                                const PromptLayout& layout,
                                const TokenSeq& response,
                                const PruneParams& params, bool target_kv) {
    const int n = layout.num_sources();
    const int kept = params.kept_count(n);
    std::vector<int> kept_sorted = top_k_indices(selection_scores, kept);
    std::sort(kept_sorted.begin(), kept_sorted.end());

    PromptLayout shortened = sub_layout(layout, kept_sorted);
    AttributionScores target_scores =
        loo_auto(target_backend, shortened, response, target_kv);
    for (auto& st : target_scores.cost.stages) st.stage = "prune-target";

    AttributionScores out;
    out.scores.assign(n, 0.0);
    for (size_t j = 0; j < kept_sorted.size(); ++j) {
        out.scores[kept_sorted[j]] = target_scores.scores[j];
    }

    std::vector<bool> retained(n, false);
    for (int s : kept_sorted) retained[s] = true;
    std::vector<int> pruned;
    for (int s = 0; s < n; ++s) {
        if (!retained[s]) pruned.push_back(s);
    }
    std::stable_sort(pruned.begin(), pruned.end(), [&](int a, int b) {
        return selection_scores[a] > selection_scores[b];
    });
    if (!pruned.empty()) {
        double floor_score = *std::min_element(target_scores.scores.begin(),
                                               target_scores.scores.end());
        std::vector<double> rungs =
            sentinel_ladder(floor_score, static_cast<int>(pruned.size()));
        for (size_t r = 0; r < pruned.size(); ++r) {
            out.scores[pruned[r]] = rungs[r];
        }
    }

    out.params["kept_sources"] = kept;
    out.cost = std::move(selection_cost);
    append_stages(out.cost, target_scores.cost);
    return out;
}

} // namespace

int HierParams::kept_count(int num_groups) const {
    return clamp_kept(beta, min_keep, num_groups);
}

void HierParams::validate() const {
    if (!(beta > 0.0 && beta <= 1.0)) {
        throw Error("hierarchical: beta must be in (0, 1]");
    }
    if (min_keep < 1) throw Error("hierarchical: min_keep must be >= 1");
}

int PruneParams::kept_count(int num_sources) const {
    return clamp_kept(alpha, min_keep, num_sources);
}

void PruneParams::validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) {
        throw Error("prune: alpha must be in (0, 1]");
    }
    if (min_keep < 1) throw Error("prune: min_keep must be >= 1");
}

std::vector<double> sentinel_ladder(double floor_score, int count) {
    // Steps sized so each rung stays strictly below the previous one in
    // double precision even when floor_score is large in magnitude.
    double step = std::max(1e-9, std::abs(floor_score) * 1e-12);
    std::vector<double> out(count);
    for (int i = 0; i < count; ++i) {
        out[i] = floor_score - step * (i + 1);
    }
    return out;
}

AttributionScores hierarchical(AttributionBackend& backend,
                               const PromptLayout& layout,
                               const TokenSeq& response,
                               const HierParams& params,
                               std::optional<bool> use_kv) {
    params.validate();
    if (layout.num_groups() < 1) throw Error("hierarchical: no source groups");
    for (const auto& g : layout.groups) {
        if (g.empty()) throw Error("hierarchical: empty source group");
    }
    bool kv = use_kv.value_or(backend.capabilities().kv_sessions);
    auto start = Clock::now();

    GroupAttribution stage1 =
        leave_group_out(backend, layout, response, layout.groups, kv);
    for (auto& st : stage1.cost.stages) st.stage = "hier-group";

    const int kept_groups = params.kept_count(layout.num_groups());
    std::vector<int> top_groups = top_k_indices(stage1.scores, kept_groups);
    std::vector<bool> group_kept(layout.num_groups(), false);
    for (int g : top_groups) group_kept[g] = true;

    std::vector<int> kept_sources;
    for (int g = 0; g < layout.num_groups(); ++g) {
        if (!group_kept[g]) continue;
        for (int s : layout.groups[g]) kept_sources.push_back(s);
    }
    std::sort(kept_sources.begin(), kept_sources.end());

    PromptLayout shortened = sub_layout(layout, kept_sources);
    AttributionScores stage2 = loo_auto(backend, shortened, response, kv);
    for (auto& st : stage2.cost.stages) st.stage = "hier-source";

    AttributionScores out;
    out.method = "hierarchical";
    out.params = {{"beta", params.beta},
                  {"min_keep", params.min_keep},
                  {"kept_groups", kept_groups}};
    out.scores.assign(layout.num_sources(), 0.0);
    for (size_t j = 0; j < kept_sources.size(); ++j) {
        out.scores[kept_sources[j]] = stage2.scores[j];
    }

    // Dropped sources rank below every retained one, ordered by their
    // group's stage-1 score (earlier group wins ties), then source order.
    std::vector<int> dropped_groups;
    for (int g = 0; g < layout.num_groups(); ++g) {
        if (!group_kept[g]) dropped_groups.push_back(g);
    }
    std::stable_sort(dropped_groups.begin(), dropped_groups.end(),
                     [&](int a, int b) {
                         return stage1.scores[a] > stage1.scores[b];
                     });
    std::vector<int> dropped_sources;
    for (int g : dropped_groups) {
        for (int s : layout.groups[g]) dropped_sources.push_back(s);
    }
    if (!dropped_sources.empty()) {
        double floor_score =
            *std::min_element(stage2.scores.begin(), stage2.scores.end());
        std::vector<double> rungs = sentinel_ladder(
            floor_score, static_cast<int>(dropped_sources.size()));
        for (size_t r = 0; r < dropped_sources.size(); ++r) {
            out.scores[dropped_sources[r]] = rungs[r];
        }
    }

    append_stages(out.cost, stage1.cost);
    append_stages(out.cost, stage2.cost);
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

AttributionScores proxy_attribute(AttributionBackend& proxy_backend,
                                  const PromptLayout& layout,
                                  const TokenSeq& target_response,
                                  std::optional<bool> use_kv) {
    check_tokenizer(proxy_backend, layout);
    bool kv = use_kv.value_or(proxy_backend.capabilities().kv_sessions);
    AttributionScores out = loo_auto(proxy_backend, layout, target_response, kv);
    out.method = "proxy";
    out.params["proxy_model"] = proxy_backend.model_id();
    return out;
}

AttributionScores proxy_prune(AttributionBackend& target_backend,
                              AttributionBackend& proxy_backend,
                              const PromptLayout& layout,
                              const TokenSeq& response,
                              const PruneParams& params,
                              std::optional<bool> use_kv) {
    params.validate();
    check_tokenizer(proxy_backend, layout);
    check_tokenizer(target_backend, layout);
    auto start = Clock::now();

    bool proxy_kv = use_kv.value_or(proxy_backend.capabilities().kv_sessions);
    bool target_kv = use_kv.value_or(target_backend.capabilities().kv_sessions);

    AttributionScores proxy_scores =
        loo_auto(proxy_backend, layout, response, proxy_kv);
    for (auto& st : proxy_scores.cost.stages) st.stage = "prune-proxy";

    AttributionScores out =
        prune_rescore(target_backend, proxy_scores.scores,
                      std::move(proxy_scores.cost), layout, response, params,
                      target_kv);
    out.method = "prune";
    out.params["alpha"] = params.alpha;
    out.params["min_keep"] = params.min_keep;
    out.params["proxy_model"] = proxy_backend.model_id();
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

bool PipelineSpec::has(const std::string& stage) const {
    return std::find(stages.begin(), stages.end(), stage) != stages.end();
}

void PipelineSpec::validate(bool have_proxy) const {
    int n_proxy = 0, n_prune = 0, n_hier = 0, n_kv = 0;
    for (const auto& s : stages) {
        if (s == "proxy") ++n_proxy;
        else if (s == "prune") ++n_prune;
        else if (s == "hierarchical") ++n_hier;
        else if (s == "kv") ++n_kv;
        else throw Error("pipeline: unknown stage '" + s + "'");
    }
    if (n_proxy > 1 || n_prune > 1 || n_hier > 1 || n_kv > 1) {
        throw Error("pipeline: each stage may appear at most once");
    }
    bool references_proxy = n_proxy > 0 || n_prune > 0;
    if (references_proxy && !have_proxy) {
        throw Error("pipeline: spec references a proxy model but none was "
                    "provided");
    }
    if (!references_proxy && have_proxy) {
        throw Error("pipeline: a proxy model was provided but no stage "
                    "references it");
    }
    if (n_hier > 0) hier.validate();
    if (n_prune > 0) prune.validate();
}

nlohmann::json PipelineSpec::to_json() const {
    nlohmann::json j;
    j["stages"] = stages;
    if (has("hierarchical")) {
        j["beta"] = hier.beta;
        j["hier_min_keep"] = hier.min_keep;
    }
    if (has("prune")) {
        j["alpha"] = prune.alpha;
        j["prune_min_keep"] = prune.min_keep;
    }
    return j;
}

PipelineSpec PipelineSpec::from_json(const nlohmann::json& j) {
    PipelineSpec spec;
    if (!j.contains("stages") || !j["stages"].is_array()) {
        throw Error("pipeline spec: missing 'stages' array");
    }
    for (const auto& s : j["stages"]) {
        spec.stages.push_back(s.get<std::string>());
    }
    if (j.contains("beta")) spec.hier.beta = j["beta"].get<double>();
    if (j.contains("hier_min_keep")) {
        spec.hier.min_keep = j["hier_min_keep"].get<int>();
    }
    if (j.contains("alpha")) spec.prune.alpha = j["alpha"].get<double>();
    if (j.contains("prune_min_keep")) {
        spec.prune.min_keep = j["prune_min_keep"].get<int>();
    }
    return spec;
}

AttributionScores run_pipeline(const PipelineSpec& spec,
                               AttributionBackend& target_backend,
                               AttributionBackend* proxy_backend,
                               const PromptLayout& layout,
                               const TokenSeq& response) {
    spec.validate(proxy_backend != nullptr);
    auto start = Clock::now();
    const bool kv = spec.has("kv");

    // Canonical order: selection (proxy and/or hierarchical) first, target
    // re-scoring (prune) last.
    AttributionBackend& scorer =
        (spec.has("proxy") || spec.has("prune")) ? *proxy_backend
                                                 : target_backend;
    bool scorer_kv = kv && scorer.capabilities().kv_sessions;

    AttributionScores selected =
        spec.has("hierarchical")
            ? hierarchical(scorer, layout, response, spec.hier, scorer_kv)
            : loo_auto(scorer, layout, response, scorer_kv);

    AttributionScores out;
    if (!spec.has("prune")) {
        out = std::move(selected);
        out.params = nlohmann::json::object();
    } else {
        bool target_kv = kv && target_backend.capabilities().kv_sessions;
        out = prune_rescore(target_backend, selected.scores,
                            std::move(selected.cost), layout, response,
                            spec.prune, target_kv);
    }

    out.method = "pipeline";
    out.params = spec.to_json();
    if (proxy_backend) out.params["proxy_model"] = proxy_backend->model_id();
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

} // namespace attribot
