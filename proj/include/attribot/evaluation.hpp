#pragma once

#include <string>
#include <vector>

#include "attribot/attribution.hpp"

namespace attribot {

struct EsdConfig {
    double alpha_sig = 0.05;
    int k_max = 50;

    void validate() const;
};

struct EsdIteration {
    int index = -1;      // original index of the tested (largest) value
    double g = 0.0;      // Grubbs statistic on the remaining data
    double g_crit = 0.0; // critical value at alpha_sig / (2 * remaining)
    bool outlier = false;
    int n_remaining = 0; // sample size when tested
};

struct EsdResult {
    std::vector<int> outliers; // ordered by removal
    std::vector<EsdIteration> iterations;
    std::string note; // set when no detection was possible

    int n_out() const { return static_cast<int>(outliers.size()); }
};

// One-sided (largest value) generalized ESD test: iteratively test the
// maximum's Grubbs statistic against the critical value and remove it while
// it exceeds the critical value, up to k_max removals. Fewer than 3 values
// or zero sample standard deviation stops detection.
EsdResult esd_outliers(const std::vector<double>& values,
                       const EsdConfig& config);

// Upper critical value of Student's t with `dof` degrees of freedom at
// upper-tail probability p, by bisection on the CDF (regularized incomplete
// beta) to 1e-10.
double student_t_upper_critical(double p, int dof);

// AP of the descending-score ranking (ties break toward the earlier index)
// against the set of relevant indices:
//   AP = (1/|relevant|) * sum over relevant items of precision@rank(item).
double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& relevant);

struct MeanApResult {
    double map = 0.0;
    int evaluated = 0;
    int skipped = 0; // examples with an empty relevant set
};

MeanApResult mean_ap(
    const std::vector<std::pair<std::vector<double>, std::vector<int>>>&
        examples);

// Product-moment correlation; throws on length mismatch, fewer than two
// points, or zero variance.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

enum class FlopsMethod { loo, kv, proxy, prune, hierarchical };

FlopsMethod flops_method_from_string(const std::string& name);
std::string to_string(FlopsMethod method);

struct FlopsParams {
    double target_params = 0.0; // P
    double proxy_params = 0.0;  // P'
    double tokens_per_source = 0.0; // T
    double num_sources = 0.0;   // |C|
    double sources_per_group = 0.0; // H
    double alpha = 1.0;
    double beta = 1.0;

    void validate(FlopsMethod method) const;
};

struct FlopsEstimate {
    double flops = 0.0;
    double speedup_over_loo = 0.0;
};

// Closed forms:
//   loo:          2 P T |C| (|C| - 1)                        speedup 1
//   kv:             P T |C| (|C| - 1)                        speedup 2
//   proxy:        2 P' T |C| (|C| - 1)                       speedup P/P'
//   prune:        2 P T |C| ((a^2 + P'/P)|C| - a - P'/P)
//   hierarchical: 2 P T |C| ((b^2 + 1/H)|C| - b - 1)
FlopsEstimate theoretical_flops(FlopsMethod method, const FlopsParams& params);

// Pass-by-pass cost simulation under the same idealization the closed forms
// use (uniform T tokens per source, context tokens only, exact fractional
// keeps, base pass excluded). counted_flops of the result reproduces the
// closed forms.
CostRecord simulate_cost_record(FlopsMethod method, const FlopsParams& params);

// Sum over stages of flops_factor * model_params * uncached_tokens; cached
// tokens cost nothing under this approximation.
double counted_flops(const CostRecord& record);

} // namespace attribot
