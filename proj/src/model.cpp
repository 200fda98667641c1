#include "attribot/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "attribot/errors.hpp"

namespace attribot {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kPi = 3.14159265358979323846;
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double gelu(double x) {
    double u = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    double u = kGeluC * (x + 0.044715 * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// y[o] = sum_i W[o][i] x[i], W row-major float, accumulation in double.
void matvec(const std::vector<float>& w, const double* x, double* y,
            int out_dim, int in_dim) {
    for (int o = 0; o < out_dim; ++o) {
        const float* row = w.data() + static_cast<size_t>(o) * in_dim;
        double acc = 0.0;
        for (int i = 0; i < in_dim; ++i) acc += double(row[i]) * x[i];
        y[o] = acc;
    }
}

// x[i] += sum_o W[o][i] y[o]  (transpose apply, used by the backward pass)
void matvec_t_add(const std::vector<float>& w, const double* y, double* x,
                  int out_dim, int in_dim) {
    for (int o = 0; o < out_dim; ++o) {
        const float* row = w.data() + static_cast<size_t>(o) * in_dim;
        double yo = y[o];
        for (int i = 0; i < in_dim; ++i) x[i] += double(row[i]) * yo;
    }
}

struct LnStats {
    double mu = 0.0;
    double inv_sigma = 0.0;
};

LnStats layer_norm(const double* x, const float* g, const float* b, double* y,
                   int d) {
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += x[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        double dv = x[i] - mu;
        var += dv * dv;
    }
    var /= d;
    double inv_sigma = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) {
        y[i] = double(g[i]) * (x[i] - mu) * inv_sigma + double(b[i]);
    }
    return LnStats{mu, inv_sigma};
}

// dx += backward of layer_norm given upstream dy, the forward input x and
// its stats.
void layer_norm_backward(const double* dy, const double* x, const float* g,
                         const LnStats& st, double* dx, int d) {
    double mean_dyh = 0.0;
    double mean_dyh_xh = 0.0;
    for (int i = 0; i < d; ++i) {
        double xh = (x[i] - st.mu) * st.inv_sigma;
        double dyh = dy[i] * double(g[i]);
        mean_dyh += dyh;
        mean_dyh_xh += dyh * xh;
    }
    mean_dyh /= d;
    mean_dyh_xh /= d;
    for (int i = 0; i < d; ++i) {
        double xh = (x[i] - st.mu) * st.inv_sigma;
        double dyh = dy[i] * double(g[i]);
        dx[i] += st.inv_sigma * (dyh - mean_dyh - xh * mean_dyh_xh);
    }
}

struct EmbOverride {
    int64_t internal_pos = -1;
    int32_t coord = 0;
    double delta = 0.0;
};

void input_embedding(const ModelWeights& w, Token tok, int64_t pos, double* e,
                     const EmbOverride* ov) {
    const int d = w.config.d_model;
    const float* erow = w.embedding.data() + static_cast<size_t>(tok) * d;
    const float* prow = w.pos.data() + static_cast<size_t>(pos) * d;
    for (int i = 0; i < d; ++i) e[i] = double(erow[i]) + double(prow[i]);
    if (ov && ov->internal_pos == pos) e[ov->coord] += ov->delta;
}

// Log-probabilities of the next token given the final hidden state y.
// Output head is the tied embedding; ids >= 256 (specials, spare slots)
// are masked out of the softmax.
void logits_to_logprobs(const ModelWeights& w, const double* y,
                        std::vector<double>& out) {
    const int d = w.config.d_model;
    out.assign(static_cast<size_t>(w.config.vocab), kNegInf);
    double max_logit = kNegInf;
    for (int v = 0; v < kByteVocab; ++v) {
        const float* row = w.embedding.data() + static_cast<size_t>(v) * d;
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += double(row[i]) * y[i];
        out[v] = acc;
        max_logit = std::max(max_logit, acc);
    }
    double sum = 0.0;
    for (int v = 0; v < kByteVocab; ++v) sum += std::exp(out[v] - max_logit);
    double lse = max_logit + std::log(sum);
    for (int v = 0; v < kByteVocab; ++v) out[v] -= lse;
}

// Processes one token at internal position pos (== current cached length),
// appending its K/V per layer. Optionally emits next-token log-probs.
void step_token(const ModelWeights& w, std::vector<std::vector<double>>& kc,
                std::vector<std::vector<double>>& vc, Token tok, int64_t pos,
                std::vector<double>* logprobs_out) {
    const ModelConfig& cfg = w.config;
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));

    if (pos >= cfg.max_seq) {
        throw Error("sequence too long: position " + std::to_string(pos) +
                    " exceeds max_seq " + std::to_string(cfg.max_seq) +
                    " (one slot is reserved for BOS)");
    }
    if (tok < 0 || tok >= cfg.vocab) {
        throw Error("token id out of range: " + std::to_string(tok));
    }

    std::vector<double> x(d), a(d), q(d), k(d), v(d), attn(d), y(d);
    std::vector<double> scores;
    std::vector<double> ff(cfg.d_ff);

    input_embedding(w, tok, pos, x.data(), nullptr);

    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        layer_norm(x.data(), lw.ln1_g.data(), lw.ln1_b.data(), a.data(), d);
        matvec(lw.wq, a.data(), q.data(), d, d);
        matvec(lw.wk, a.data(), k.data(), d, d);
        matvec(lw.wv, a.data(), v.data(), d, d);
        kc[l].insert(kc[l].end(), k.begin(), k.end());
        vc[l].insert(vc[l].end(), v.begin(), v.end());

        const int64_t n_ctx = pos + 1;
        scores.resize(n_ctx);
        for (int hh = 0; hh < cfg.heads; ++hh) {
            const int off = hh * dh;
            double max_s = kNegInf;
            for (int64_t j = 0; j < n_ctx; ++j) {
                const double* kj = kc[l].data() + j * d + off;
                double acc = 0.0;
                for (int i = 0; i < dh; ++i) acc += q[off + i] * kj[i];
                scores[j] = acc * scale;
                max_s = std::max(max_s, scores[j]);
            }
            double denom = 0.0;
            for (int64_t j = 0; j < n_ctx; ++j) {
                scores[j] = std::exp(scores[j] - max_s);
                denom += scores[j];
            }
            for (int i = 0; i < dh; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < n_ctx; ++j) {
                    acc += (scores[j] / denom) * vc[l][j * d + off + i];
                }
                attn[off + i] = acc;
            }
        }
        matvec(lw.wo, attn.data(), y.data(), d, d);
        for (int i = 0; i < d; ++i) x[i] += y[i];

        layer_norm(x.data(), lw.ln2_g.data(), lw.ln2_b.data(), a.data(), d);
        matvec(lw.w1, a.data(), ff.data(), cfg.d_ff, d);
        for (int i = 0; i < cfg.d_ff; ++i) ff[i] = gelu(ff[i]);
        matvec(lw.w2, ff.data(), y.data(), d, cfg.d_ff);
        for (int i = 0; i < d; ++i) x[i] += y[i];
    }

    if (logprobs_out) {
        layer_norm(x.data(), w.lnf_g.data(), w.lnf_b.data(), y.data(), d);
        logits_to_logprobs(w, y.data(), *logprobs_out);
    }
}

// Whole-sequence forward pass retaining every intermediate needed for the
// backward pass and for attention export.
struct FullForward {
    // per position, per layer
    std::vector<std::vector<std::vector<double>>> x_in, a1, q, k, v, attn_cat,
        x_mid, a2, ff_pre, ff_act;
    std::vector<std::vector<LnStats>> st1, st2; // [pos][layer]
    std::vector<std::vector<std::vector<double>>> attn_w; // [layer][head] rows
    std::vector<std::vector<double>> x_out; // final residual stream per pos
    std::vector<LnStats> stf;
    std::vector<std::vector<double>> y_final; // post final LN per pos
    int64_t n = 0;
};

void forward_full(const ModelWeights& w, const TokenSeq& internal_tokens,
                  const EmbOverride* ov, FullForward& f) {
    const ModelConfig& cfg = w.config;
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));
    const int64_t n = static_cast<int64_t>(internal_tokens.size());

    if (n > cfg.max_seq) {
        throw Error("sequence too long: " + std::to_string(n) + " > max_seq " +
                    std::to_string(cfg.max_seq));
    }

    f.n = n;
    auto sized = [&](int per) {
        return std::vector<std::vector<std::vector<double>>>(
            n, std::vector<std::vector<double>>(cfg.layers,
                                                std::vector<double>(per)));
    };
    f.x_in = sized(d);
    f.a1 = sized(d);
    f.q = sized(d);
    f.k = sized(d);
    f.v = sized(d);
    f.attn_cat = sized(d);
    f.x_mid = sized(d);
    f.a2 = sized(d);
    f.ff_pre = sized(cfg.d_ff);
    f.ff_act = sized(cfg.d_ff);
    f.st1.assign(n, std::vector<LnStats>(cfg.layers));
    f.st2.assign(n, std::vector<LnStats>(cfg.layers));
    f.attn_w.assign(cfg.layers, std::vector<std::vector<double>>(cfg.heads));
    for (int l = 0; l < cfg.layers; ++l) {
        for (int hh = 0; hh < cfg.heads; ++hh) {
            f.attn_w[l][hh].assign(static_cast<size_t>(n) * n, 0.0);
        }
    }
    f.x_out.assign(n, std::vector<double>(d));
    f.stf.assign(n, LnStats{});
    f.y_final.assign(n, std::vector<double>(d));

    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    for (int64_t t = 0; t < n; ++t) {
        Token tok = internal_tokens[t];
        if (tok < 0 || tok >= cfg.vocab) {
            throw Error("token id out of range: " + std::to_string(tok));
        }
        input_embedding(w, tok, t, x[t].data(), ov);
    }

    std::vector<double> tmp(d);
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        for (int64_t t = 0; t < n; ++t) {
            f.x_in[t][l] = x[t];
            f.st1[t][l] = layer_norm(x[t].data(), lw.ln1_g.data(),
                                     lw.ln1_b.data(), f.a1[t][l].data(), d);
            matvec(lw.wq, f.a1[t][l].data(), f.q[t][l].data(), d, d);
            matvec(lw.wk, f.a1[t][l].data(), f.k[t][l].data(), d, d);
            matvec(lw.wv, f.a1[t][l].data(), f.v[t][l].data(), d, d);
        }
        for (int64_t t = 0; t < n; ++t) {
            for (int hh = 0; hh < cfg.heads; ++hh) {
                const int off = hh * dh;
                double* wrow = f.attn_w[l][hh].data() + t * n;
                double max_s = kNegInf;
                for (int64_t j = 0; j <= t; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < dh; ++i) {
                        acc += f.q[t][l][off + i] * f.k[j][l][off + i];
                    }
                    wrow[j] = acc * scale;
                    max_s = std::max(max_s, wrow[j]);
                }
                double denom = 0.0;
                for (int64_t j = 0; j <= t; ++j) {
                    wrow[j] = std::exp(wrow[j] - max_s);
                    denom += wrow[j];
                }
                for (int64_t j = 0; j <= t; ++j) wrow[j] /= denom;
                for (int i = 0; i < dh; ++i) {
                    double acc = 0.0;
                    for (int64_t j = 0; j <= t; ++j) {
                        acc += wrow[j] * f.v[j][l][off + i];
                    }
                    f.attn_cat[t][l][off + i] = acc;
                }
            }
            matvec(lw.wo, f.attn_cat[t][l].data(), tmp.data(), d, d);
            for (int i = 0; i < d; ++i) x[t][i] += tmp[i];
            f.x_mid[t][l] = x[t];

            f.st2[t][l] = layer_norm(x[t].data(), lw.ln2_g.data(),
                                     lw.ln2_b.data(), f.a2[t][l].data(), d);
            matvec(lw.w1, f.a2[t][l].data(), f.ff_pre[t][l].data(), cfg.d_ff, d);
            for (int i = 0; i < cfg.d_ff; ++i) {
                f.ff_act[t][l][i] = gelu(f.ff_pre[t][l][i]);
            }
            matvec(lw.w2, f.ff_act[t][l].data(), tmp.data(), d, cfg.d_ff);
            for (int i = 0; i < d; ++i) x[t][i] += tmp[i];
        }
    }

    for (int64_t t = 0; t < n; ++t) {
        f.x_out[t] = x[t];
        f.stf[t] = layer_norm(x[t].data(), w.lnf_g.data(), w.lnf_b.data(),
                              f.y_final[t].data(), d);
    }
}

TokenSeq make_internal(const TokenSeq& tokens) {
    TokenSeq internal;
    internal.reserve(tokens.size() + 1);
    internal.push_back(kBosToken);
    internal.insert(internal.end(), tokens.begin(), tokens.end());
    return internal;
}

// Sum of log p(tokens[t]) over caller positions in scored_span, computed
// from a full forward pass (the logits for caller position t live at
// internal position t).
double scored_loglik_from_forward(const ModelWeights& w, const FullForward& f,
                                  const TokenSeq& internal_tokens,
                                  Span scored_span) {
    std::vector<double> lp;
    double total = 0.0;
    for (int64_t u = scored_span.begin; u < scored_span.end; ++u) {
        // internal logit position u predicts internal token u+1
        logits_to_logprobs(w, f.y_final[u].data(), lp);
        Token target = internal_tokens[u + 1];
        if (target < 0 || target >= kByteVocab) {
            throw Error("cannot score non-byte token id " +
                        std::to_string(target));
        }
        total += lp[target];
    }
    return total;
}

} // namespace

void ModelConfig::validate() const {
    if (layers < 1) throw Error("config: layers must be >= 1");
    if (heads < 1) throw Error("config: heads must be >= 1");
    if (d_model < 1 || d_model % heads != 0) {
        throw Error("config: d_model must be positive and divisible by heads");
    }
    if (d_ff < 1) throw Error("config: d_ff must be >= 1");
    if (vocab < kMinVocab) {
        throw Error("config: vocab must be >= " + std::to_string(kMinVocab) +
                    " (256 bytes + BOS + EOS)");
    }
    if (max_seq < 2) throw Error("config: max_seq must be >= 2");
}

int64_t ModelWeights::param_count() const {
    const int64_t d = config.d_model;
    const int64_t per_layer = 2 * d            // ln1
                              + 4 * d * d      // wq, wk, wv, wo
                              + 2 * d          // ln2
                              + 2 * int64_t(config.d_ff) * d; // w1, w2
    return int64_t(config.vocab) * d + int64_t(config.max_seq) * d +
           int64_t(config.layers) * per_layer + 2 * d;
}

namespace {

// Deterministic normal sampler: standard-specified mt19937_64 stream plus a
// hand-rolled uniform and Box-Muller, so weights are bit-identical across
// platforms (std::normal_distribution is implementation-defined).
class GaussDraw {
public:
    explicit GaussDraw(uint64_t seed) : rng_(seed) {}

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * kPi * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * kPi * u2);
    }

    void fill(std::vector<float>& dst, size_t count, double stddev) {
        dst.resize(count);
        for (auto& f : dst) f = static_cast<float>(normal() * stddev);
    }

private:
    double uniform() { return double(rng_() >> 11) * 0x1.0p-53; }

    std::mt19937_64 rng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace

ModelWeights init_reference_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    ModelWeights w;
    w.config = config;
    const size_t d = config.d_model;
    const size_t ff = config.d_ff;
    GaussDraw g(seed);

    const double emb_std = 0.1;
    const double proj_std = 1.0 / std::sqrt(double(d));
    const double ff_std = 1.0 / std::sqrt(double(ff));

    g.fill(w.embedding, size_t(config.vocab) * d, emb_std);
    g.fill(w.pos, size_t(config.max_seq) * d, emb_std);
    w.layers.resize(config.layers);
    for (auto& lw : w.layers) {
        lw.ln1_g.assign(d, 1.0f);
        lw.ln1_b.assign(d, 0.0f);
        g.fill(lw.wq, d * d, proj_std);
        g.fill(lw.wk, d * d, proj_std);
        g.fill(lw.wv, d * d, proj_std);
        g.fill(lw.wo, d * d, proj_std);
        lw.ln2_g.assign(d, 1.0f);
        lw.ln2_b.assign(d, 0.0f);
        g.fill(lw.w1, ff * d, proj_std);
        g.fill(lw.w2, d * ff, ff_std);
    }
    w.lnf_g.assign(d, 1.0f);
    w.lnf_b.assign(d, 0.0f);
    return w;
}

ModelWeights init_zero_model(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    const size_t d = config.d_model;
    const size_t ff = config.d_ff;
    w.embedding.assign(size_t(config.vocab) * d, 0.0f);
    w.pos.assign(size_t(config.max_seq) * d, 0.0f);
    w.layers.resize(config.layers);
    for (auto& lw : w.layers) {
        lw.ln1_g.assign(d, 0.0f);
        lw.ln1_b.assign(d, 0.0f);
        lw.wq.assign(d * d, 0.0f);
        lw.wk.assign(d * d, 0.0f);
        lw.wv.assign(d * d, 0.0f);
        lw.wo.assign(d * d, 0.0f);
        lw.ln2_g.assign(d, 0.0f);
        lw.ln2_b.assign(d, 0.0f);
        lw.w1.assign(ff * d, 0.0f);
        lw.w2.assign(d * ff, 0.0f);
    }
    w.lnf_g.assign(d, 0.0f);
    w.lnf_b.assign(d, 0.0f);
    return w;
}

namespace {

void write_i32(std::ostream& os, int32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = (uint32_t(v) >> (8 * i)) & 0xff;
    os.write(reinterpret_cast<const char*>(b), 4);
}

int32_t read_i32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
    return static_cast<int32_t>(v);
}

void write_f32s(std::ostream& os, const std::vector<float>& v) {
    for (float f : v) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = (bits >> (8 * i)) & 0xff;
        os.write(reinterpret_cast<const char*>(b), 4);
    }
}

void read_f32s(std::istream& is, std::vector<float>& v, size_t count) {
    v.resize(count);
    for (size_t i = 0; i < count; ++i) {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        uint32_t bits = 0;
        for (int j = 0; j < 4; ++j) bits |= uint32_t(b[j]) << (8 * j);
        std::memcpy(&v[i], &bits, 4);
    }
}

constexpr char kMagic[5] = {'A', 'B', 'O', 'T', '1'};

} // namespace

void save_model(const ModelWeights& w, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open model file for writing: " + path);
    os.write(kMagic, 5);
    write_i32(os, w.config.layers);
    write_i32(os, w.config.heads);
    write_i32(os, w.config.d_model);
    write_i32(os, w.config.d_ff);
    write_i32(os, w.config.vocab);
    write_i32(os, w.config.max_seq);
    write_f32s(os, w.embedding);
    write_f32s(os, w.pos);
    for (const auto& lw : w.layers) {
        write_f32s(os, lw.ln1_g);
        write_f32s(os, lw.ln1_b);
        write_f32s(os, lw.wq);
        write_f32s(os, lw.wk);
        write_f32s(os, lw.wv);
        write_f32s(os, lw.wo);
        write_f32s(os, lw.ln2_g);
        write_f32s(os, lw.ln2_b);
        write_f32s(os, lw.w1);
        write_f32s(os, lw.w2);
    }
    write_f32s(os, w.lnf_g);
    write_f32s(os, w.lnf_b);
    if (!os) throw Error("failed while writing model file: " + path);
}

ModelWeights load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open model file: " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, kMagic, 5) != 0) {
        throw Error("not a model file (bad magic): " + path);
    }
    ModelWeights w;
    w.config.layers = read_i32(is);
    w.config.heads = read_i32(is);
    w.config.d_model = read_i32(is);
    w.config.d_ff = read_i32(is);
    w.config.vocab = read_i32(is);
    w.config.max_seq = read_i32(is);
    w.config.validate();
    const size_t d = w.config.d_model;
    const size_t ff = w.config.d_ff;
    read_f32s(is, w.embedding, size_t(w.config.vocab) * d);
    read_f32s(is, w.pos, size_t(w.config.max_seq) * d);
    w.layers.resize(w.config.layers);
    for (auto& lw : w.layers) {
        read_f32s(is, lw.ln1_g, d);
        read_f32s(is, lw.ln1_b, d);
        read_f32s(is, lw.wq, d * d);
        read_f32s(is, lw.wk, d * d);
        read_f32s(is, lw.wv, d * d);
        read_f32s(is, lw.wo, d * d);
        read_f32s(is, lw.ln2_g, d);
        read_f32s(is, lw.ln2_b, d);
        read_f32s(is, lw.w1, ff * d);
        read_f32s(is, lw.w2, d * ff);
    }
    read_f32s(is, w.lnf_g, d);
    read_f32s(is, w.lnf_b, d);
    if (!is) throw Error("model file truncated: " + path);
    return w;
}

RefModel::RefModel(std::shared_ptr<const ModelWeights> weights)
    : weights_(std::move(weights)) {
    if (!weights_) throw Error("RefModel: null weights");
    weights_->config.validate();
    // Sanity: weight arrays must match the config-derived sizes.
    const size_t d = weights_->config.d_model;
    if (weights_->embedding.size() != size_t(weights_->config.vocab) * d ||
        weights_->layers.size() != size_t(weights_->config.layers)) {
        throw Error("RefModel: weight shapes do not match config");
    }
}

double RefModel::score_continuation(const TokenSeq& prefix,
                                    const TokenSeq& continuation) const {
    if (continuation.empty()) throw Error("score_continuation: empty continuation");
    Session s = session_create(prefix);
    return session_score(s, continuation, nullptr);
}

std::vector<double> RefModel::next_token_logprobs(const TokenSeq& prefix) const {
    Session s = session_create(prefix);
    return s.next_logprobs_;
}

Session RefModel::session_create(const TokenSeq& prefix) const {
    Session s;
    s.k_.assign(config().layers, {});
    s.v_.assign(config().layers, {});
    // BOS occupies position 0; caller tokens follow.
    std::vector<double> lp;
    step_token(*weights_, s.k_, s.v_, kBosToken, 0,
               prefix.empty() ? &lp : nullptr);
    for (size_t i = 0; i < prefix.size(); ++i) {
        bool last = (i + 1 == prefix.size());
        step_token(*weights_, s.k_, s.v_, prefix[i],
                   static_cast<int64_t>(i) + 1, last ? &lp : nullptr);
    }
    s.prefix_ = prefix;
    s.next_logprobs_ = std::move(lp);
    return s;
}

Session RefModel::session_fork(const Session& session, int64_t position) {
    if (position < 0 || position > session.cached_len()) {
        throw Error("session_fork: position " + std::to_string(position) +
                    " beyond cached length " +
                    std::to_string(session.cached_len()));
    }
    Session s;
    const size_t n_int = static_cast<size_t>(position) + 1; // + BOS
    s.k_.resize(session.k_.size());
    s.v_.resize(session.v_.size());
    for (size_t l = 0; l < session.k_.size(); ++l) {
        size_t d = session.k_[l].size() / (session.cached_len() + 1);
        s.k_[l].assign(session.k_[l].begin(),
                       session.k_[l].begin() + n_int * d);
        s.v_[l].assign(session.v_[l].begin(),
                       session.v_[l].begin() + n_int * d);
    }
    s.prefix_.assign(session.prefix_.begin(),
                     session.prefix_.begin() + position);
    if (position == session.cached_len()) {
        s.next_logprobs_ = session.next_logprobs_; // still valid
    }
    return s;
}

void RefModel::session_extend(Session& session, const TokenSeq& tokens,
                              SessionCost* cost) const {
    if (tokens.empty()) return;
    std::vector<double> lp;
    for (size_t i = 0; i < tokens.size(); ++i) {
        bool last = (i + 1 == tokens.size());
        step_token(*weights_, session.k_, session.v_, tokens[i],
                   session.cached_len() + 1, last ? &lp : nullptr);
        session.prefix_.push_back(tokens[i]);
    }
    session.next_logprobs_ = std::move(lp);
    if (cost) cost->uncached_tokens += static_cast<int64_t>(tokens.size());
}

double RefModel::session_score(Session& session, const TokenSeq& continuation,
                               SessionCost* cost) const {
    if (continuation.empty()) throw Error("session_score: empty continuation");
    if (cost) cost->cached_tokens += session.cached_len();

    if (session.next_logprobs_.empty()) {
        // The cache holds K/V but no fresh logits (a fork landed exactly at
        // the cache end). Recompute the last cached position.
        int64_t n_int = session.cached_len() + 1;
        for (auto& kl : session.k_) kl.resize((n_int - 1) * config().d_model);
        for (auto& vl : session.v_) vl.resize((n_int - 1) * config().d_model);
        Token last_tok = session.prefix_.empty() ? kBosToken
                                                 : session.prefix_.back();
        std::vector<double> lp;
        step_token(*weights_, session.k_, session.v_, last_tok, n_int - 1, &lp);
        session.next_logprobs_ = std::move(lp);
        if (cost && !session.prefix_.empty()) {
            cost->uncached_tokens += 1;
            cost->cached_tokens -= 1;
        }
    }

    double total = 0.0;
    std::vector<double> lp;
    for (size_t i = 0; i < continuation.size(); ++i) {
        Token tok = continuation[i];
        if (tok < 0 || tok >= kByteVocab) {
            throw Error("cannot score non-byte token id " + std::to_string(tok));
        }
        total += session.next_logprobs_[tok];
        step_token(*weights_, session.k_, session.v_, tok,
                   session.cached_len() + 1, &lp);
        session.prefix_.push_back(tok);
        session.next_logprobs_ = lp;
    }
    if (cost) cost->uncached_tokens += static_cast<int64_t>(continuation.size());
    return total;
}

Attentions RefModel::forward_attentions(const TokenSeq& tokens) const {
    TokenSeq internal = make_internal(tokens);
    FullForward f;
    forward_full(*weights_, internal, nullptr, f);
    Attentions out;
    out.seq_len = f.n;
    out.maps = std::move(f.attn_w);
    return out;
}

std::vector<std::vector<double>> RefModel::embedding_gradients(
    const TokenSeq& tokens, Span scored_span) const {
    const ModelConfig& cfg = config();
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));

    if (scored_span.begin < 0 ||
        scored_span.end > static_cast<int32_t>(tokens.size()) ||
        scored_span.begin >= scored_span.end) {
        throw Error("embedding_gradients: scored span out of range");
    }

    TokenSeq internal = make_internal(tokens);
    FullForward f;
    forward_full(*weights_, internal, nullptr, f);
    const int64_t n = f.n;

    // dL/dx_out per position, seeded through the output head at every logit
    // position of the scored span. Caller span [a, b) corresponds to
    // internal logit positions [a, b) predicting internal tokens [a+1, b+1).
    std::vector<std::vector<double>> dx(n, std::vector<double>(d, 0.0));
    std::vector<double> lp, dy(d);
    for (int64_t u = scored_span.begin; u < scored_span.end; ++u) {
        logits_to_logprobs(*weights_, f.y_final[u].data(), lp);
        Token target = internal[u + 1];
        if (target < 0 || target >= kByteVocab) {
            throw Error("cannot score non-byte token id " +
                        std::to_string(target));
        }
        std::fill(dy.begin(), dy.end(), 0.0);
        for (int vtok = 0; vtok < kByteVocab; ++vtok) {
            double g = (vtok == target ? 1.0 : 0.0) - std::exp(lp[vtok]);
            const float* row =
                weights_->embedding.data() + static_cast<size_t>(vtok) * d;
            for (int i = 0; i < d; ++i) dy[i] += g * double(row[i]);
        }
        layer_norm_backward(dy.data(), f.x_out[u].data(), weights_->lnf_g.data(),
                            f.stf[u], dx[u].data(), d);
    }

    std::vector<double> dh_act(cfg.d_ff), dh_pre(cfg.d_ff), da(d), dtmp(d);
    std::vector<std::vector<double>> dq(n, std::vector<double>(d));
    std::vector<std::vector<double>> dk(n, std::vector<double>(d));
    std::vector<std::vector<double>> dv(n, std::vector<double>(d));
    std::vector<double> dw_row;

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerWeights& lw = weights_->layers[l];

        // FFN block backward: dx currently holds dL/dx_out of this layer.
        for (int64_t t = 0; t < n; ++t) {
            std::fill(dh_act.begin(), dh_act.end(), 0.0);
            matvec_t_add(lw.w2, dx[t].data(), dh_act.data(), d, cfg.d_ff);
            for (int i = 0; i < cfg.d_ff; ++i) {
                dh_pre[i] = dh_act[i] * gelu_grad(f.ff_pre[t][l][i]);
            }
            std::fill(da.begin(), da.end(), 0.0);
            matvec_t_add(lw.w1, dh_pre.data(), da.data(), cfg.d_ff, d);
            // residual: dL/dx_mid = dL/dx_out + LN2 backward contribution
            layer_norm_backward(da.data(), f.x_mid[t][l].data(), lw.ln2_g.data(),
                                f.st2[t][l], dx[t].data(), d);
        }

        // Attention block backward. dx now holds dL/dx_mid.
        for (int64_t t = 0; t < n; ++t) {
            std::fill(dq[t].begin(), dq[t].end(), 0.0);
            std::fill(dk[t].begin(), dk[t].end(), 0.0);
            std::fill(dv[t].begin(), dv[t].end(), 0.0);
        }
        for (int64_t t = 0; t < n; ++t) {
            std::fill(dtmp.begin(), dtmp.end(), 0.0);
            matvec_t_add(lw.wo, dx[t].data(), dtmp.data(), d, d); // d attn_cat
            for (int hh = 0; hh < cfg.heads; ++hh) {
                const int off = hh * dh;
                const double* wrow = f.attn_w[l][hh].data() + t * n;
                dw_row.assign(static_cast<size_t>(t) + 1, 0.0);
                double dot_wd = 0.0;
                for (int64_t j = 0; j <= t; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < dh; ++i) {
                        dv[j][off + i] += wrow[j] * dtmp[off + i];
                        acc += dtmp[off + i] * f.v[j][l][off + i];
                    }
                    dw_row[j] = acc;
                    dot_wd += wrow[j] * acc;
                }
                for (int64_t j = 0; j <= t; ++j) {
                    double ds = wrow[j] * (dw_row[j] - dot_wd) * scale;
                    for (int i = 0; i < dh; ++i) {
                        dq[t][off + i] += ds * f.k[j][l][off + i];
                        dk[j][off + i] += ds * f.q[t][l][off + i];
                    }
                }
            }
        }
        for (int64_t t = 0; t < n; ++t) {
            std::fill(da.begin(), da.end(), 0.0);
            matvec_t_add(lw.wq, dq[t].data(), da.data(), d, d);
            matvec_t_add(lw.wk, dk[t].data(), da.data(), d, d);
            matvec_t_add(lw.wv, dv[t].data(), da.data(), d, d);
            // residual: dL/dx_in = dL/dx_mid + LN1 backward contribution
            layer_norm_backward(da.data(), f.x_in[t][l].data(), lw.ln1_g.data(),
                                f.st1[t][l], dx[t].data(), d);
        }
    }

    // Drop the BOS position; callers index by their own tokens.
    std::vector<std::vector<double>> grads(tokens.size());
    for (size_t t = 0; t < tokens.size(); ++t) grads[t] = std::move(dx[t + 1]);
    return grads;
}

double RefModel::score_span_with_embedding_bump(const TokenSeq& tokens,
                                                Span scored_span,
                                                int32_t position, int32_t coord,
                                                double delta) const {
    TokenSeq internal = make_internal(tokens);
    EmbOverride ov;
    ov.internal_pos = position + 1;
    ov.coord = coord;
    ov.delta = delta;
    FullForward f;
    forward_full(*weights_, internal, &ov, f);
    return scored_loglik_from_forward(*weights_, f, internal, scored_span);
}

TokenSeq RefModel::greedy_generate(const TokenSeq& prompt, int max_new) const {
    if (max_new < 0) throw Error("greedy_generate: negative max_new");
    int64_t needed = 1 + static_cast<int64_t>(prompt.size()) + max_new;
    if (needed > config().max_seq) {
        throw Error("greedy_generate: prompt too long for max_new " +
                    std::to_string(max_new));
    }
    TokenSeq out;
    if (max_new == 0) return out;
    Session s = session_create(prompt);
    for (int i = 0; i < max_new; ++i) {
        const std::vector<double>& lp = s.next_logprobs_;
        Token best = 0;
        double best_lp = lp[0];
        for (Token v = 1; v < static_cast<Token>(lp.size()); ++v) {
            if (lp[v] > best_lp) {
                best_lp = lp[v];
                best = v;
            }
        }
        if (best == kEosToken) break;
        out.push_back(best);
        session_extend(s, {best});
    }
    return out;
}

} // namespace attribot
