#include "attribot/attribution.hpp"

#include <algorithm>
#include <chrono>

#include "attribot/errors.hpp"

namespace attribot {

namespace {

double sum_over(const std::vector<StageCost>& stages,
                double StageCost::*field) {
    double total = 0.0;
    for (const auto& s : stages) total += s.*field;
    return total;
}

using Clock = std::chrono::steady_clock;

int64_t elapsed_ns(Clock::time_point start) {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() -
                                                                start)
        .count();
}

void validate_inputs(const PromptLayout& layout, const TokenSeq& response) {
    if (layout.num_sources() < 1) {
        throw Error("attribution requires at least one source");
    }
    if (response.empty()) throw Error("attribution requires a response");
}

void absorb_base(StageCost& stage, const EvalCost& cost) {
    if (cost.evaluated) stage.base_passes += 1;
    stage.base_uncached_tokens += double(cost.uncached_tokens);
}

void absorb_pass(StageCost& stage, const EvalCost& cost) {
    stage.passes += 1;
    stage.uncached_tokens += double(cost.uncached_tokens);
    stage.cached_tokens += double(cost.cached_tokens);
}

AttributionScores loo_impl(AttributionBackend& backend,
                           const PromptLayout& layout,
                           const TokenSeq& response, bool use_kv,
                           const std::string& method) {
    validate_inputs(layout, response);
    auto start = Clock::now();

    StageCost stage;
    stage.stage = method;
    stage.model_id = backend.model_id();
    stage.model_params = double(backend.param_count());

    EvalCost base_cost;
    double base = backend.base_loglik(layout, response, use_kv, base_cost);
    absorb_base(stage, base_cost);

    AttributionScores out;
    out.method = method;
    out.scores.resize(layout.num_sources());
    for (int i = 0; i < layout.num_sources(); ++i) {
        EvalCost c;
        double ablated =
            backend.ablated_loglik(layout, response, {i}, use_kv, c);
        absorb_pass(stage, c);
        out.scores[i] = base - ablated;
    }
    out.cost.stages.push_back(std::move(stage));
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

} // namespace

double CostRecord::passes() const {
    return sum_over(stages, &StageCost::passes);
}
double CostRecord::base_passes() const {
    return sum_over(stages, &StageCost::base_passes);
}
double CostRecord::uncached_tokens() const {
    return sum_over(stages, &StageCost::uncached_tokens);
}
double CostRecord::cached_tokens() const {
    return sum_over(stages, &StageCost::cached_tokens);
}
double CostRecord::base_uncached_tokens() const {
    return sum_over(stages, &StageCost::base_uncached_tokens);
}

AttributionScores loo_exact(AttributionBackend& backend,
                            const PromptLayout& layout,
                            const TokenSeq& response) {
    return loo_impl(backend, layout, response, false, "loo");
}

AttributionScores loo_kv(AttributionBackend& backend,
                         const PromptLayout& layout,
                         const TokenSeq& response) {
    if (!backend.capabilities().kv_sessions) {
        throw CapabilityError("backend '" + backend.model_id() +
                              "' has no kv_sessions capability");
    }
    return loo_impl(backend, layout, response, true, "kv");
}

GroupAttribution leave_group_out(AttributionBackend& backend,
                                 const PromptLayout& layout,
                                 const TokenSeq& response,
                                 const std::vector<std::vector<int>>& grouping,
                                 std::optional<bool> use_kv) {
    validate_inputs(layout, response);
    const int n = layout.num_sources();
    std::vector<int> seen(n, 0);
    for (const auto& members : grouping) {
        if (members.empty()) {
            throw Error("leave_group_out: empty group in grouping");
        }
        for (int i : members) {
            if (i < 0 || i >= n || seen[i]++) {
                throw Error("leave_group_out: grouping is not a partition "
                            "of the sources");
            }
        }
    }
    if (std::count(seen.begin(), seen.end(), 1) != n) {
        throw Error("leave_group_out: grouping is not a partition of the "
                    "sources");
    }

    bool kv = use_kv.value_or(backend.capabilities().kv_sessions);
    auto start = Clock::now();

    StageCost stage;
    stage.stage = "group";
    stage.model_id = backend.model_id();
    stage.model_params = double(backend.param_count());

    EvalCost base_cost;
    double base = backend.base_loglik(layout, response, kv, base_cost);
    absorb_base(stage, base_cost);

    GroupAttribution out;
    out.scores.reserve(grouping.size());
    for (const auto& members : grouping) {
        std::vector<int> removed = members;
        std::sort(removed.begin(), removed.end());
        EvalCost c;
        double ablated =
            backend.ablated_loglik(layout, response, removed, kv, c);
        absorb_pass(stage, c);
        out.scores.push_back(base - ablated);
    }
    out.cost.stages.push_back(std::move(stage));
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

} // namespace attribot
