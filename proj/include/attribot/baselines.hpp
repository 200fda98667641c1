#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "attribot/attribution.hpp"

namespace attribot {

// Attention-weight baseline: total attention mass that response-token query
// positions place on each source's tokens, summed across all layers and
// heads.
AttributionScores attention_attribution(AttributionBackend& backend,
                                        const PromptLayout& layout,
                                        const TokenSeq& response);

// Gradient-norm baseline: Frobenius norm, over each source's token
// embeddings, of the gradient of the response's total log-probability.
AttributionScores gradnorm_attribution(AttributionBackend& backend,
                                       const PromptLayout& layout,
                                       const TokenSeq& response);

class TextEmbedder {
public:
    virtual ~TextEmbedder() = default;
    virtual std::vector<double> embed(const std::string& text) const = 0;
};

// Self-contained embedder: mean of the reference model's input-embedding
// rows over the text's byte tokens.
class ReferenceEmbedder : public TextEmbedder {
public:
    explicit ReferenceEmbedder(std::shared_ptr<const ModelWeights> weights);
    std::vector<double> embed(const std::string& text) const override;

private:
    std::shared_ptr<const ModelWeights> weights_;
};

// Cosine similarity between each source's embedding and the response
// embedding; zero vectors score 0 by convention.
AttributionScores embed_sim_attribution(const TextEmbedder& embedder,
                                        const PromptLayout& layout,
                                        const TokenSeq& response);

struct SurrogateFit {
    std::vector<double> weights;
    double intercept = 0.0;
    double lambda = 0.0;
    double residual_norm = 0.0;
    std::vector<double> objective_trace; // per completed sweep
};

// Lasso via cyclic coordinate descent with an unpenalized intercept:
//   minimize (1/2n) * ||y - Xw - b||^2 + lambda * ||w||_1
// X is row-major n x d. Runs to relative objective tolerance 1e-8 or 10^4
// sweeps, whichever first. Deterministic given inputs.
SurrogateFit lasso_fit(const std::vector<double>& x, int n, int d,
                       const std::vector<double>& y, double lambda);

enum class TargetScale { logit, log };

struct ContextCiteParams {
    int n = 256;               // ablation vectors
    double p = 0.5;            // Bernoulli keep probability
    std::optional<double> lambda; // default: 0.01 * max|X^T (y - ybar)| / n
    TargetScale scale = TargetScale::logit;
    uint64_t seed = 0;

    void validate() const;
};

// ContextCite: sample n keep-masks ~ Bernoulli(p) per source, evaluate the
// response likelihood on each masked context, regress the scaled targets on
// the masks with lasso_fit; scores are the fitted weights.
AttributionScores contextcite(AttributionBackend& backend,
                              const PromptLayout& layout,
                              const TokenSeq& response,
                              const ContextCiteParams& params);

} // namespace attribot
