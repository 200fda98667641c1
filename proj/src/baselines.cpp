#include "attribot/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "attribot/errors.hpp"

namespace attribot {

namespace {

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

TokenSeq full_sequence(const PromptLayout& layout, const TokenSeq& response) {
    TokenSeq seq = layout.full_prompt;
    seq.insert(seq.end(), response.begin(), response.end());
    return seq;
}

} // namespace

AttributionScores attention_attribution(AttributionBackend& backend,
                                        const PromptLayout& layout,
                                        const TokenSeq& response) {
    validate_inputs(layout, response);
    if (!backend.capabilities().attention_export) {
        throw CapabilityError("backend '" + backend.model_id() +
                              "' does not export attention maps");
    }
    auto start = Clock::now();
    TokenSeq seq = full_sequence(layout, response);
    Attentions att = backend.forward_attentions(seq);
    const int64_t n_int = att.seq_len; // includes the BOS slot at position 0

    // Caller position t sits at internal position t + 1.
    const int64_t resp_begin = static_cast<int64_t>(layout.full_prompt.size()) + 1;
    const int64_t resp_end = resp_begin + static_cast<int64_t>(response.size());

    AttributionScores out;
    out.method = "attention";
    out.scores.assign(layout.num_sources(), 0.0);
    for (const auto& layer : att.maps) {
        for (const auto& head : layer) {
            for (int64_t qp = resp_begin; qp < resp_end; ++qp) {
                const double* row = head.data() + qp * n_int;
                for (int i = 0; i < layout.num_sources(); ++i) {
                    const Span& s = layout.source_spans[i];
                    double acc = 0.0;
                    for (int64_t kp = s.begin + 1; kp < s.end + 1; ++kp) {
                        acc += row[kp];
                    }
                    out.scores[i] += acc;
                }
            }
        }
    }

    StageCost stage;
    stage.stage = "attention";
    stage.model_id = backend.model_id();
    stage.model_params = double(backend.param_count());
    stage.passes = 1;
    stage.uncached_tokens = double(seq.size());
    out.cost.stages.push_back(std::move(stage));
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

AttributionScores gradnorm_attribution(AttributionBackend& backend,
                                       const PromptLayout& layout,
                                       const TokenSeq& response) {
    validate_inputs(layout, response);
    if (!backend.capabilities().embedding_gradients) {
        throw CapabilityError("backend '" + backend.model_id() +
                              "' does not expose embedding gradients");
    }
    auto start = Clock::now();
    TokenSeq seq = full_sequence(layout, response);
    Span scored{static_cast<int32_t>(layout.full_prompt.size()),
                static_cast<int32_t>(seq.size())};
    auto grads = backend.embedding_gradients(seq, scored);

    AttributionScores out;
    out.method = "gradnorm";
    out.scores.assign(layout.num_sources(), 0.0);
    for (int i = 0; i < layout.num_sources(); ++i) {
        const Span& s = layout.source_spans[i];
        double sq = 0.0;
        for (int32_t t = s.begin; t < s.end; ++t) {
            for (double g : grads[t]) sq += g * g;
        }
        out.scores[i] = std::sqrt(sq);
    }

    StageCost stage;
    stage.stage = "gradnorm";
    stage.model_id = backend.model_id();
    stage.model_params = double(backend.param_count());
    stage.passes = 1;
    stage.uncached_tokens = double(seq.size());
    stage.flops_factor = 6.0; // forward plus ~2x-forward backward
    out.cost.stages.push_back(std::move(stage));
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

ReferenceEmbedder::ReferenceEmbedder(std::shared_ptr<const ModelWeights> weights)
    : weights_(std::move(weights)) {
    if (!weights_) throw Error("ReferenceEmbedder: null weights");
}

std::vector<double> ReferenceEmbedder::embed(const std::string& text) const {
    const int d = weights_->config.d_model;
    std::vector<double> out(d, 0.0);
    TokenSeq tokens = tokenize(text);
    if (tokens.empty()) return out;
    for (Token t : tokens) {
        const float* row = weights_->embedding.data() + size_t(t) * d;
        for (int i = 0; i < d; ++i) out[i] += double(row[i]);
    }
    for (int i = 0; i < d; ++i) out[i] /= double(tokens.size());
    return out;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw Error("cosine: embedding dimensions differ");
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace

AttributionScores embed_sim_attribution(const TextEmbedder& embedder,
                                        const PromptLayout& layout,
                                        const TokenSeq& response) {
    validate_inputs(layout, response);
    auto start = Clock::now();
    std::vector<double> resp_emb = embedder.embed(detokenize(response));

    AttributionScores out;
    out.method = "embedsim";
    out.scores.reserve(layout.num_sources());
    for (const auto& text : layout.source_texts) {
        out.scores.push_back(cosine(embedder.embed(text), resp_emb));
    }

    // No target/proxy model forward passes are involved.
    StageCost stage;
    stage.stage = "embedsim";
    stage.model_id = "embedder";
    out.cost.stages.push_back(std::move(stage));
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

SurrogateFit lasso_fit(const std::vector<double>& x, int n, int d,
                       const std::vector<double>& y, double lambda) {
    if (n < 1 || d < 1) throw Error("lasso_fit: need n >= 1 and d >= 1");
    if (x.size() != size_t(n) * d || y.size() != size_t(n)) {
        throw Error("lasso_fit: shape mismatch");
    }
    for (double v : x) {
        if (!std::isfinite(v)) throw Error("lasso_fit: non-finite design value");
    }
    for (double v : y) {
        if (!std::isfinite(v)) throw Error("lasso_fit: non-finite target");
    }
    if (lambda < 0.0) throw Error("lasso_fit: negative lambda");

    constexpr int kMaxSweeps = 10000;
    constexpr double kRelTol = 1e-8;

    std::vector<double> col_sq(d, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            col_sq[j] += x[size_t(i) * d + j] * x[size_t(i) * d + j];
        }
    }
    for (int j = 0; j < d; ++j) col_sq[j] /= n;

    SurrogateFit fit;
    fit.lambda = lambda;
    fit.weights.assign(d, 0.0);
    double b = 0.0;
    for (double v : y) b += v;
    b /= n;

    std::vector<double> r(n); // r = y - b - Xw
    for (int i = 0; i < n; ++i) r[i] = y[i] - b;

    auto soft = [](double v, double t) {
        if (v > t) return v - t;
        if (v < -t) return v + t;
        return 0.0;
    };
    auto objective = [&]() {
        double sq = 0.0;
        for (double v : r) sq += v * v;
        double l1 = 0.0;
        for (double w : fit.weights) l1 += std::abs(w);
        return sq / (2.0 * n) + lambda * l1;
    };

    double prev_obj = objective();
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        for (int j = 0; j < d; ++j) {
            if (col_sq[j] == 0.0) {
                fit.weights[j] = 0.0;
                continue;
            }
            double rho = 0.0;
            for (int i = 0; i < n; ++i) {
                double xij = x[size_t(i) * d + j];
                rho += xij * (r[i] + xij * fit.weights[j]);
            }
            rho /= n;
            double w_new = soft(rho, lambda) / col_sq[j];
            double delta = w_new - fit.weights[j];
            if (delta != 0.0) {
                for (int i = 0; i < n; ++i) r[i] -= x[size_t(i) * d + j] * delta;
                fit.weights[j] = w_new;
            }
        }
        double mean_r = 0.0;
        for (double v : r) mean_r += v;
        mean_r /= n;
        if (mean_r != 0.0) {
            b += mean_r;
            for (double& v : r) v -= mean_r;
        }

        double obj = objective();
        fit.objective_trace.push_back(obj);
        if (std::abs(prev_obj - obj) <= kRelTol * std::max(1.0, std::abs(obj))) {
            break;
        }
        prev_obj = obj;
    }

    fit.intercept = b;
    double sq = 0.0;
    for (double v : r) sq += v * v;
    fit.residual_norm = std::sqrt(sq);
    return fit;
}

void ContextCiteParams::validate() const {
    if (n < 2) throw Error("contextcite: n must be >= 2");
    if (!(p > 0.0 && p < 1.0)) throw Error("contextcite: p must be in (0, 1)");
    if (lambda && *lambda < 0.0) throw Error("contextcite: negative lambda");
}

namespace {

// Logit of the response probability with the log-probability clamped to
// [-30, -1e-9]; unclamped values would hit +/-infinity at p -> 0 or 1.
double scale_target(double loglik, TargetScale scale) {
    if (scale == TargetScale::log) return loglik;
    double l = std::clamp(loglik, -30.0, -1e-9);
    return l - std::log1p(-std::exp(l));
}

} // namespace

AttributionScores contextcite(AttributionBackend& backend,
                              const PromptLayout& layout,
                              const TokenSeq& response,
                              const ContextCiteParams& params) {
    validate_inputs(layout, response);
    params.validate();
    auto start = Clock::now();

    const int n = params.n;
    const int d = layout.num_sources();
    const bool kv = backend.capabilities().kv_sessions;

    std::mt19937_64 rng(params.seed);
    auto uniform = [&]() { return double(rng() >> 11) * 0x1.0p-53; };

    std::vector<uint8_t> masks; // n x d keep flags
    bool varied = false;
    for (int attempt = 0; attempt < 10 && !varied; ++attempt) {
        masks.assign(size_t(n) * d, 0);
        for (auto& m : masks) m = uniform() < params.p ? 1 : 0;
        for (int i = 1; i < n && !varied; ++i) {
            varied = !std::equal(masks.begin(), masks.begin() + d,
                                 masks.begin() + size_t(i) * d);
        }
    }
    if (!varied) {
        throw Error("contextcite: all ablation masks identical after 10 "
                    "attempts; increase n or move p away from 0/1");
    }

    StageCost stage;
    stage.stage = "contextcite";
    stage.model_id = backend.model_id();
    stage.model_params = double(backend.param_count());

    EvalCost base_cost;
    double base = backend.base_loglik(layout, response, kv, base_cost);
    if (base_cost.evaluated) stage.base_passes += 1;
    stage.base_uncached_tokens += double(base_cost.uncached_tokens);
    double base_scaled = scale_target(base, params.scale);

    std::vector<double> x(size_t(n) * d);
    std::vector<double> y(n);
    for (int i = 0; i < n; ++i) {
        std::vector<int> removed;
        for (int j = 0; j < d; ++j) {
            bool keep = masks[size_t(i) * d + j] != 0;
            x[size_t(i) * d + j] = keep ? 1.0 : 0.0;
            if (!keep) removed.push_back(j);
        }
        EvalCost c;
        double loglik = backend.ablated_loglik(layout, response, removed, kv, c);
        stage.passes += 1;
        stage.uncached_tokens += double(c.uncached_tokens);
        stage.cached_tokens += double(c.cached_tokens);
        y[i] = scale_target(loglik, params.scale) - base_scaled;
    }

    double lambda;
    if (params.lambda) {
        lambda = *params.lambda;
    } else {
        double ybar = 0.0;
        for (double v : y) ybar += v;
        ybar /= n;
        double max_corr = 0.0;
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += x[size_t(i) * d + j] * (y[i] - ybar);
            }
            max_corr = std::max(max_corr, std::abs(acc));
        }
        lambda = 0.01 * max_corr / n;
    }

    SurrogateFit fit = lasso_fit(x, n, d, y, lambda);

    AttributionScores out;
    out.method = "contextcite";
    out.scores = fit.weights;
    out.params = {{"n", n},
                  {"p", params.p},
                  {"lambda", lambda},
                  {"scale", params.scale == TargetScale::logit ? "logit" : "log"},
                  {"seed", params.seed}};
    out.cost.stages.push_back(std::move(stage));
    out.cost.wall_ns = elapsed_ns(start);
    return out;
}

} // namespace attribot
