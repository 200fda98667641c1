#include "attribot/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "attribot/errors.hpp"

namespace attribot {

namespace {

// Continued fraction for the regularized incomplete beta (modified Lentz).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;

    double qab = a + b;
    double qap = a + 1.0;
    double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double reg_inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log(1.0 - x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

// P(T > t) for t >= 0 with nu degrees of freedom.
double t_upper_tail(double t, int nu) {
    double x = nu / (nu + t * t);
    return 0.5 * reg_inc_beta(nu / 2.0, 0.5, x);
}

} // namespace

double student_t_upper_critical(double p, int dof) {
    if (dof < 1) throw Error("t critical value: dof must be >= 1");
    if (!(p > 0.0 && p < 1.0)) {
        throw Error("t critical value: p must be in (0, 1)");
    }
    if (p == 0.5) return 0.0;
    if (p > 0.5) return -student_t_upper_critical(1.0 - p, dof);

    double lo = 0.0;
    double hi = 1.0;
    while (t_upper_tail(hi, dof) > p) {
        hi *= 2.0;
        if (hi > 1e12) break;
    }
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (t_upper_tail(mid, dof) > p) {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo <= 1e-10 * std::max(1.0, hi)) break;
    }
    return 0.5 * (lo + hi);
}

void EsdConfig::validate() const {
    if (!(alpha_sig > 0.0 && alpha_sig < 1.0)) {
        throw Error("esd: significance must be in (0, 1)");
    }
    if (k_max < 0) throw Error("esd: k_max must be >= 0");
}

EsdResult esd_outliers(const std::vector<double>& values,
                       const EsdConfig& config) {
    config.validate();
    EsdResult result;
    if (values.size() < 3) {
        result.note = "fewer than 3 values; no detection possible";
        return result;
    }
    for (double v : values) {
        if (!std::isfinite(v)) throw Error("esd: non-finite value");
    }

    std::vector<std::pair<double, int>> data; // (value, original index)
    data.reserve(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        data.emplace_back(values[i], static_cast<int>(i));
    }

    for (int iter = 0; iter < config.k_max; ++iter) {
        const int n = static_cast<int>(data.size());
        if (n < 3) break;

        double mean = 0.0;
        for (const auto& [v, idx] : data) mean += v;
        mean /= n;
        double ss = 0.0;
        for (const auto& [v, idx] : data) ss += (v - mean) * (v - mean);
        double s = std::sqrt(ss / (n - 1));
        if (s == 0.0) break;

        // Largest value; earliest original index wins ties.
        size_t arg = 0;
        for (size_t j = 1; j < data.size(); ++j) {
            if (data[j].first > data[arg].first) arg = j;
        }

        EsdIteration it;
        it.index = data[arg].second;
        it.n_remaining = n;
        it.g = (data[arg].first - mean) / s;
        double p = config.alpha_sig / (2.0 * n);
        double t = student_t_upper_critical(p, n - 2);
        it.g_crit = (n - 1) * t / std::sqrt(double(n) * (n - 2 + t * t));
        it.outlier = it.g > it.g_crit;
        result.iterations.push_back(it);
        if (!it.outlier) break;

        result.outliers.push_back(it.index);
        data.erase(data.begin() + arg);
    }
    return result;
}

double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& relevant) {
    if (relevant.empty()) {
        throw Error("average_precision: empty relevant set");
    }
    const int n = static_cast<int>(scores.size());
    std::vector<char> is_relevant(n, 0);
    for (int r : relevant) {
        if (r < 0 || r >= n) {
            throw Error("average_precision: relevant index out of range");
        }
        is_relevant[r] = 1;
    }

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });

    double ap = 0.0;
    int hits = 0;
    for (int rank = 0; rank < n; ++rank) {
        if (is_relevant[order[rank]]) {
            ++hits;
            ap += double(hits) / double(rank + 1);
        }
    }
    return ap / double(relevant.size());
}

MeanApResult mean_ap(
    const std::vector<std::pair<std::vector<double>, std::vector<int>>>&
        examples) {
    MeanApResult out;
    double total = 0.0;
    for (const auto& [scores, relevant] : examples) {
        if (relevant.empty()) {
            ++out.skipped;
            continue;
        }
        total += average_precision(scores, relevant);
        ++out.evaluated;
    }
    out.map = out.evaluated > 0 ? total / out.evaluated : 0.0;
    return out;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw Error("pearson: length mismatch");
    if (x.size() < 2) throw Error("pearson: need at least two points");
    const double n = double(x.size());
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw Error("pearson: undefined for zero variance");
    }
    return sxy / std::sqrt(sxx * syy);
}

FlopsMethod flops_method_from_string(const std::string& name) {
    if (name == "loo") return FlopsMethod::loo;
    if (name == "kv") return FlopsMethod::kv;
    if (name == "proxy") return FlopsMethod::proxy;
    if (name == "prune") return FlopsMethod::prune;
    if (name == "hier" || name == "hierarchical") {
        return FlopsMethod::hierarchical;
    }
    throw Error("unknown flops method: " + name);
}

std::string to_string(FlopsMethod method) {
    switch (method) {
        case FlopsMethod::loo: return "loo";
        case FlopsMethod::kv: return "kv";
        case FlopsMethod::proxy: return "proxy";
        case FlopsMethod::prune: return "prune";
        case FlopsMethod::hierarchical: return "hierarchical";
    }
    throw Error("unknown flops method");
}

void FlopsParams::validate(FlopsMethod method) const {
    if (target_params <= 0.0) throw Error("flops: P must be positive");
    if (tokens_per_source <= 0.0) throw Error("flops: T must be positive");
    if (num_sources <= 0.0) throw Error("flops: |C| must be positive");
    if (method == FlopsMethod::proxy || method == FlopsMethod::prune) {
        if (proxy_params <= 0.0) throw Error("flops: P' must be positive");
    }
    if (method == FlopsMethod::prune && !(alpha > 0.0 && alpha <= 1.0)) {
        throw Error("flops: alpha must be in (0, 1]");
    }
    if (method == FlopsMethod::hierarchical) {
        if (!(beta > 0.0 && beta <= 1.0)) {
            throw Error("flops: beta must be in (0, 1]");
        }
        if (sources_per_group <= 0.0) {
            throw Error("flops: H must be positive");
        }
        if (std::fmod(num_sources, sources_per_group) != 0.0) {
            throw Error("flops: H must divide |C| in the closed forms");
        }
    }
}

FlopsEstimate theoretical_flops(FlopsMethod method, const FlopsParams& pr) {
    pr.validate(method);
    const double p = pr.target_params;
    const double pp = pr.proxy_params;
    const double t = pr.tokens_per_source;
    const double c = pr.num_sources;
    const double h = pr.sources_per_group;
    const double a = pr.alpha;
    const double b = pr.beta;

    FlopsEstimate out;
    switch (method) {
        case FlopsMethod::loo:
            out.flops = 2.0 * p * t * c * (c - 1.0);
            out.speedup_over_loo = 1.0;
            break;
        case FlopsMethod::kv:
            out.flops = p * t * c * (c - 1.0);
            out.speedup_over_loo = 2.0;
            break;
        case FlopsMethod::proxy:
            out.flops = 2.0 * pp * t * c * (c - 1.0);
            out.speedup_over_loo = p / pp;
            break;
        case FlopsMethod::prune:
            out.flops =
                2.0 * p * t * c * ((a * a + pp / p) * c - a - pp / p);
            out.speedup_over_loo =
                p * (c - 1.0) / ((a * a * p + pp) * c - a * p - pp);
            break;
        case FlopsMethod::hierarchical:
            out.flops = 2.0 * p * t * c * ((b * b + 1.0 / h) * c - b - 1.0);
            out.speedup_over_loo =
                h * (c - 1.0) / ((b * b * h + 1.0) * c - b * h - h);
            break;
    }
    return out;
}

CostRecord simulate_cost_record(FlopsMethod method, const FlopsParams& pr) {
    pr.validate(method);
    const double t = pr.tokens_per_source;
    const double c = pr.num_sources;

    auto stage = [](std::string name, double params, double passes,
                    double uncached, double cached = 0.0) {
        StageCost s;
        s.stage = std::move(name);
        s.model_id = "simulated";
        s.model_params = params;
        s.passes = passes;
        s.uncached_tokens = uncached;
        s.cached_tokens = cached;
        return s;
    };

    CostRecord record;
    switch (method) {
        case FlopsMethod::loo:
            record.stages.push_back(
                stage("loo", pr.target_params, c, c * t * (c - 1.0)));
            break;
        case FlopsMethod::kv: {
            // Pass i reuses the first i-1 sources: sum of T(|C|-i) uncached.
            double half = t * c * (c - 1.0) / 2.0;
            record.stages.push_back(
                stage("kv", pr.target_params, c, half, half));
            break;
        }
        case FlopsMethod::proxy:
            record.stages.push_back(
                stage("proxy", pr.proxy_params, c, c * t * (c - 1.0)));
            break;
        case FlopsMethod::prune: {
            record.stages.push_back(stage("prune-proxy", pr.proxy_params, c,
                                          c * t * (c - 1.0)));
            double kept = pr.alpha * c;
            record.stages.push_back(stage("prune-target", pr.target_params,
                                          kept, kept * t * (kept - 1.0)));
            break;
        }
        case FlopsMethod::hierarchical: {
            double groups = c / pr.sources_per_group;
            record.stages.push_back(
                stage("hier-group", pr.target_params, groups,
                      groups * t * (c - pr.sources_per_group)));
            double kept = pr.beta * c;
            record.stages.push_back(stage("hier-source", pr.target_params,
                                          kept, kept * t * (kept - 1.0)));
            break;
        }
    }
    return record;
}

double counted_flops(const CostRecord& record) {
    double total = 0.0;
    for (const auto& s : record.stages) {
        total += s.flops_factor * s.model_params * s.uncached_tokens;
    }
    return total;
}

} // namespace attribot
