#include "attribot/io.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "attribot/backend.hpp"
#include "attribot/baselines.hpp"
#include "attribot/errors.hpp"
#include "attribot/evaluation.hpp"

namespace attribot {

namespace {

// Replaces invalid UTF-8 with U+FFFD so generated byte strings can always be
// carried in JSON; the token array stays the canonical form.
std::string utf8_sanitize(const std::string& s) {
    std::string out;
    size_t i = 0;
    auto is_cont = [&](size_t k) {
        return k < s.size() && (static_cast<unsigned char>(s[k]) & 0xc0) == 0x80;
    };
    while (i < s.size()) {
        unsigned char c = s[i];
        size_t len = 0;
        if (c < 0x80) len = 1;
        else if ((c & 0xe0) == 0xc0 && c >= 0xc2) len = 2;
        else if ((c & 0xf0) == 0xe0) len = 3;
        else if ((c & 0xf8) == 0xf0 && c <= 0xf4) len = 4;
        bool ok = len > 0;
        for (size_t k = 1; ok && k < len; ++k) ok = is_cont(i + k);
        if (ok && len == 3) {
            unsigned cp = ((c & 0x0f) << 12) |
                          ((static_cast<unsigned char>(s[i + 1]) & 0x3f) << 6) |
                          (static_cast<unsigned char>(s[i + 2]) & 0x3f);
            if (cp < 0x800 || (cp >= 0xd800 && cp <= 0xdfff)) ok = false;
        }
        if (ok && len == 4) {
            unsigned cp = ((c & 0x07) << 18) |
                          ((static_cast<unsigned char>(s[i + 1]) & 0x3f) << 12) |
                          ((static_cast<unsigned char>(s[i + 2]) & 0x3f) << 6) |
                          (static_cast<unsigned char>(s[i + 3]) & 0x3f);
            if (cp < 0x10000 || cp > 0x10ffff) ok = false;
        }
        if (ok) {
            out.append(s, i, len);
            i += len;
        } else {
            out += "\xef\xbf\xbd";
            i += 1;
        }
    }
    return out;
}

uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

nlohmann::json stage_to_json(const StageCost& s) {
    return {{"stage", s.stage},
            {"model_id", s.model_id},
            {"model_params", s.model_params},
            {"passes", s.passes},
            {"base_passes", s.base_passes},
            {"uncached_tokens", s.uncached_tokens},
            {"cached_tokens", s.cached_tokens},
            {"base_uncached_tokens", s.base_uncached_tokens},
            {"flops_factor", s.flops_factor}};
}

StageCost stage_from_json(const nlohmann::json& j) {
    StageCost s;
    s.stage = j.at("stage").get<std::string>();
    s.model_id = j.at("model_id").get<std::string>();
    s.model_params = j.at("model_params").get<double>();
    s.passes = j.at("passes").get<double>();
    s.base_passes = j.at("base_passes").get<double>();
    s.uncached_tokens = j.at("uncached_tokens").get<double>();
    s.cached_tokens = j.at("cached_tokens").get<double>();
    s.base_uncached_tokens = j.at("base_uncached_tokens").get<double>();
    s.flops_factor = j.at("flops_factor").get<double>();
    return s;
}

} // namespace

DatasetLoadResult load_dataset(const std::string& path,
                               const std::string& separator) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open dataset: " + path);

    DatasetLoadResult out;
    std::set<std::string> seen_ids;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error("dataset line " + std::to_string(line_no) +
                        ": malformed JSON: " + e.what());
        }
        try {
            Example ex;
            ex.id = j.at("id").get<std::string>();
            if (ex.id.empty()) throw Error("empty id");
            if (!seen_ids.insert(ex.id).second) {
                throw Error("duplicate example id '" + ex.id + "'");
            }
            ex.query = j.at("query").get<std::string>();
            if (j.contains("response")) {
                std::string r = j.at("response").get<std::string>();
                if (r.empty()) throw Error("response present but empty");
                ex.response = std::move(r);
            }
            auto groups =
                j.at("context").get<std::vector<std::vector<std::string>>>();
            if (groups.empty()) throw Error("empty context");
            ex.partition = ContextPartition::from_texts(groups, separator);

            std::map<std::string, int> counts;
            for (const auto& g : groups) {
                for (const auto& s : g) ++counts[s];
            }
            for (const auto& [text, count] : counts) {
                if (count > 1) {
                    out.warnings.push_back(
                        "example '" + ex.id + "' (line " +
                        std::to_string(line_no) + "): source text appears " +
                        std::to_string(count) +
                        " times; duplicated sources defeat leave-one-out "
                        "scoring, consider deduplicating");
                }
            }
            out.examples.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw Error("dataset line " + std::to_string(line_no) + ": " +
                        e.what());
        } catch (const Error& e) {
            throw Error("dataset line " + std::to_string(line_no) + ": " +
                        e.what());
        }
    }
    return out;
}

nlohmann::json RunResult::to_json() const {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : cost.stages) stages.push_back(stage_to_json(s));

    nlohmann::json j;
    j["example_id"] = example_id;
    j["method"] = method;
    j["params"] = params;
    j["scores"] = scores;
    j["outliers"] = outliers;
    j["response_tokens"] = response_tokens;
    j["response_text"] = utf8_sanitize(detokenize(response_tokens));
    j["cost"] = {{"stages", stages}};
    j["counted_flops"] = counted;
    if (theoretical) {
        j["theoretical_flops"] = *theoretical;
    } else {
        j["theoretical_flops"] = nullptr;
    }
    j["seed"] = seed;
    j["response_source"] = response_source;
    j["model_id"] = model_id;
    j["proxy_model_id"] = proxy_model_id;
    j["num_sources"] = num_sources;
    return j;
}

RunResult RunResult::from_json(const nlohmann::json& j) {
    RunResult r;
    r.example_id = j.at("example_id").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.params = j.at("params");
    r.scores = j.at("scores").get<std::vector<double>>();
    r.outliers = j.at("outliers").get<std::vector<int>>();
    r.response_tokens = j.at("response_tokens").get<TokenSeq>();
    for (const auto& s : j.at("cost").at("stages")) {
        r.cost.stages.push_back(stage_from_json(s));
    }
    r.counted = j.at("counted_flops").get<double>();
    if (!j.at("theoretical_flops").is_null()) {
        r.theoretical = j.at("theoretical_flops").get<double>();
    }
    r.seed = j.at("seed").get<uint64_t>();
    r.response_source = j.at("response_source").get<std::string>();
    r.model_id = j.at("model_id").get<std::string>();
    r.proxy_model_id = j.at("proxy_model_id").get<std::string>();
    r.num_sources = j.at("num_sources").get<int>();
    return r;
}

std::vector<RunResult> read_results(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open results file: " + path);
    std::vector<RunResult> out;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(RunResult::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw Error("results line " + std::to_string(line_no) + ": " +
                        e.what());
        }
    }
    return out;
}

void write_results(const std::vector<RunResult>& results,
                   const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open output file: " + path);
    for (const auto& r : results) {
        os << r.to_json().dump() << "\n";
    }
    if (!os) throw Error("failed while writing results: " + path);
}

namespace {

int resolve_workers(int configured) {
    if (configured > 0) return configured;
    if (const char* env = std::getenv("ATTRIBOT_WORKERS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

double mean_source_tokens(const PromptLayout& layout) {
    double total = 0.0;
    for (const Span& s : layout.source_spans) total += s.size();
    return total / layout.num_sources();
}

// Closed-form FLOPs for the example's shape, when the method has one.
std::optional<double> theoretical_for(const std::string& method,
                                      const PipelineSpec* spec,
                                      const AttributeConfig& cfg,
                                      const PromptLayout& layout,
                                      double target_params,
                                      double proxy_params) {
    FlopsParams p;
    p.target_params = target_params;
    p.proxy_params = proxy_params;
    p.tokens_per_source = mean_source_tokens(layout);
    p.num_sources = layout.num_sources();
    p.sources_per_group = p.num_sources / layout.num_groups();
    p.alpha = cfg.alpha;
    p.beta = cfg.beta;
    try {
        if (method == "loo") {
            return theoretical_flops(FlopsMethod::loo, p).flops;
        }
        if (method == "kv") {
            return theoretical_flops(FlopsMethod::kv, p).flops;
        }
        if (method == "proxy") {
            return theoretical_flops(FlopsMethod::proxy, p).flops;
        }
        if (method == "prune") {
            return theoretical_flops(FlopsMethod::prune, p).flops;
        }
        if (method == "hier") {
            return theoretical_flops(FlopsMethod::hierarchical, p).flops;
        }
        if (method == "pipeline" && spec) {
            p.alpha = spec->prune.alpha;
            p.beta = spec->hier.beta;
            bool proxy_scores =
                spec->has("proxy") || spec->has("prune");
            FlopsParams sel = p;
            sel.target_params = proxy_scores ? proxy_params : target_params;
            double flops =
                spec->has("hierarchical")
                    ? theoretical_flops(FlopsMethod::hierarchical, sel).flops
                    : theoretical_flops(FlopsMethod::loo, sel).flops;
            if (spec->has("prune")) {
                double kept = spec->prune.alpha * p.num_sources;
                flops += 2.0 * target_params * p.tokens_per_source * kept *
                         (kept - 1.0);
            }
            // Prefix reuse halves each stage under the same idealization.
            if (spec->has("kv")) flops *= 0.5;
            return flops;
        }
    } catch (const Error&) {
        return std::nullopt; // shape outside the closed forms' assumptions
    }
    return std::nullopt;
}

std::string iso_timestamp() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct MethodContext {
    std::shared_ptr<const ModelWeights> weights;
    std::shared_ptr<const ModelWeights> proxy_weights;
    std::string model_id;
    std::string proxy_model_id;
    PromptTemplate tmpl;
    std::optional<PipelineSpec> pipeline;
};

RunResult process_example(const AttributeConfig& cfg, const MethodContext& mc,
                          const Example& ex, uint64_t example_seed) {
    ModelBackend target(mc.weights, mc.model_id);
    std::optional<ModelBackend> proxy;
    if (mc.proxy_weights) proxy.emplace(mc.proxy_weights, mc.proxy_model_id);

    PromptLayout layout = build_prompt(mc.tmpl, ex.partition, ex.query);
    TokenSeq response;
    std::string response_source;
    if (ex.response) {
        response = tokenize(*ex.response);
        response_source = "dataset";
    } else {
        response = target.greedy_generate(layout.full_prompt, cfg.max_new);
        response_source =
            "greedy(max_new=" + std::to_string(cfg.max_new) + ")";
    }
    if (response.empty()) {
        throw Error("example '" + ex.id + "': empty response");
    }
    layout.response = response;

    AttributionScores scores;
    const std::string& m = cfg.method;
    if (m == "loo") {
        scores = loo_exact(target, layout, response);
    } else if (m == "kv") {
        scores = loo_kv(target, layout, response);
    } else if (m == "hier") {
        HierParams hp{cfg.beta, cfg.min_keep};
        scores = hierarchical(target, layout, response, hp);
    } else if (m == "proxy") {
        scores = proxy_attribute(*proxy, layout, response);
    } else if (m == "prune") {
        PruneParams pp{cfg.alpha, cfg.min_keep};
        scores = proxy_prune(target, *proxy, layout, response, pp);
    } else if (m == "pipeline") {
        scores = run_pipeline(*mc.pipeline, target,
                              proxy ? &*proxy : nullptr, layout, response);
    } else if (m == "attention") {
        scores = attention_attribution(target, layout, response);
    } else if (m == "gradnorm") {
        scores = gradnorm_attribution(target, layout, response);
    } else if (m == "embedsim") {
        ReferenceEmbedder embedder(mc.weights);
        scores = embed_sim_attribution(embedder, layout, response);
    } else if (m == "contextcite") {
        ContextCiteParams ccp;
        ccp.n = cfg.cc_n;
        ccp.p = cfg.cc_p;
        if (cfg.cc_lambda >= 0.0) ccp.lambda = cfg.cc_lambda;
        ccp.scale =
            cfg.cc_scale == "log" ? TargetScale::log : TargetScale::logit;
        ccp.seed = example_seed;
        scores = contextcite(target, layout, response, ccp);
    } else {
        throw Error("unknown method: " + m);
    }

    RunResult r;
    r.example_id = ex.id;
    r.method = m;
    r.params = scores.params;
    r.scores = scores.scores;
    if (scores.scores.size() >= 3) {
        r.outliers = esd_outliers(scores.scores, EsdConfig{}).outliers;
    }
    r.response_tokens = response;
    r.cost = scores.cost;
    r.counted = counted_flops(scores.cost);
    r.theoretical = theoretical_for(
        m, mc.pipeline ? &*mc.pipeline : nullptr, cfg, layout,
        double(target.param_count()),
        proxy ? double(proxy->param_count()) : 0.0);
    r.seed = cfg.seed;
    r.response_source = response_source;
    r.model_id = mc.model_id;
    r.proxy_model_id = proxy ? mc.proxy_model_id : "";
    r.num_sources = layout.num_sources();
    return r;
}

std::string model_id_from_path(const std::string& path,
                               const ModelWeights& w) {
    size_t slash = path.find_last_of("/\\");
    std::string stem = slash == std::string::npos ? path
                                                  : path.substr(slash + 1);
    size_t dot = stem.find_last_of('.');
    if (dot != std::string::npos && dot > 0) stem = stem.substr(0, dot);
    return stem + "-L" + std::to_string(w.config.layers) + "-d" +
           std::to_string(w.config.d_model);
}

} // namespace

int run_attribute(const AttributeConfig& cfg) {
    static const std::set<std::string> kMethods = {
        "loo",      "kv",       "hier",     "proxy",    "prune",
        "pipeline", "attention", "gradnorm", "embedsim", "contextcite"};
    if (!kMethods.count(cfg.method)) {
        std::cerr << "error: unknown method '" << cfg.method << "'\n";
        return 2;
    }

    MethodContext mc;
    mc.weights =
        std::make_shared<const ModelWeights>(load_model(cfg.model_path));
    mc.model_id = model_id_from_path(cfg.model_path, *mc.weights);

    const bool needs_proxy = cfg.method == "proxy" || cfg.method == "prune";
    if (!cfg.proxy_model_path.empty()) {
        mc.proxy_weights = std::make_shared<const ModelWeights>(
            load_model(cfg.proxy_model_path));
        mc.proxy_model_id =
            model_id_from_path(cfg.proxy_model_path, *mc.proxy_weights);
    } else if (needs_proxy) {
        std::cerr << "error: method '" << cfg.method
                  << "' requires --proxy-model\n";
        return 2;
    }

    if (cfg.method == "pipeline") {
        if (cfg.pipeline_spec_path.empty()) {
            std::cerr << "error: method 'pipeline' requires --pipeline\n";
            return 2;
        }
        std::ifstream ps(cfg.pipeline_spec_path);
        if (!ps) {
            std::cerr << "error: cannot open pipeline spec: "
                      << cfg.pipeline_spec_path << "\n";
            return 2;
        }
        nlohmann::json j;
        ps >> j;
        mc.pipeline = PipelineSpec::from_json(j);
        try {
            mc.pipeline->validate(mc.proxy_weights != nullptr);
        } catch (const Error& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        }
    }

    if (!cfg.template_path.empty()) {
        std::ifstream ts(cfg.template_path);
        if (!ts) {
            std::cerr << "error: cannot open template: " << cfg.template_path
                      << "\n";
            return 2;
        }
        std::stringstream buf;
        buf << ts.rdbuf();
        mc.tmpl.text = buf.str();
    }

    DatasetLoadResult dataset = load_dataset(cfg.dataset_path, cfg.separator);
    for (const auto& w : dataset.warnings) {
        std::cerr << "warning: " << w << "\n";
    }

    const size_t n = dataset.examples.size();
    std::vector<std::optional<RunResult>> results(n);
    std::vector<std::string> errors(n);
    std::vector<int64_t> wall_ns(n, 0);
    std::atomic<size_t> next{0};
    std::atomic<bool> abort{false};

    auto worker = [&]() {
        while (!abort.load()) {
            size_t i = next.fetch_add(1);
            if (i >= n) break;
            auto t0 = std::chrono::steady_clock::now();
            try {
                results[i] = process_example(cfg, mc, dataset.examples[i],
                                             mix_seed(cfg.seed, i));
            } catch (const std::exception& e) {
                errors[i] = e.what();
                if (!cfg.keep_going) abort.store(true);
            }
            wall_ns[i] = std::chrono::duration_cast<std::chrono::nanoseconds>(
                             std::chrono::steady_clock::now() - t0)
                             .count();
        }
    };

    auto run_start = std::chrono::steady_clock::now();
    int workers = std::min<int>(resolve_workers(cfg.workers),
                                std::max<size_t>(n, 1));
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    int64_t total_wall =
        std::chrono::duration_cast<std::chrono::nanoseconds>(
            std::chrono::steady_clock::now() - run_start)
            .count();

    std::vector<RunResult> ordered;
    nlohmann::json meta_examples = nlohmann::json::array();
    nlohmann::json failures = nlohmann::json::array();
    for (size_t i = 0; i < n; ++i) {
        if (results[i]) {
            meta_examples.push_back({{"id", results[i]->example_id},
                                     {"wall_ns", wall_ns[i]}});
            ordered.push_back(std::move(*results[i]));
        } else if (!errors[i].empty()) {
            failures.push_back(
                {{"id", dataset.examples[i].id}, {"error", errors[i]}});
            std::cerr << "error: example '" << dataset.examples[i].id
                      << "': " << errors[i] << "\n";
        }
    }
    write_results(ordered, cfg.out_path);

    nlohmann::json meta;
    meta["timestamp"] = iso_timestamp();
    meta["total_wall_ns"] = total_wall;
    meta["workers"] = workers;
    meta["examples"] = meta_examples;
    meta["failures"] = failures;
    meta["warnings"] = dataset.warnings;
    std::ofstream ms(cfg.out_path + ".meta.json", std::ios::binary);
    ms << meta.dump(2) << "\n";

    bool failed = !failures.empty();
    if (failed && !cfg.keep_going) return 1;
    return 0;
}

int run_evaluate(const EvaluateConfig& cfg) {
    std::vector<RunResult> truth = read_results(cfg.truth_path);
    std::vector<RunResult> preds = read_results(cfg.pred_path);

    std::map<std::string, const RunResult*> truth_by_id;
    for (const auto& t : truth) {
        if (!truth_by_id.emplace(t.example_id, &t).second) {
            throw Error("duplicate truth id: " + t.example_id);
        }
        if (t.method != "loo") {
            std::cerr << "warning: truth example '" << t.example_id
                      << "' was produced by method '" << t.method
                      << "', expected exact LOO\n";
        }
    }

    if (preds.empty() || truth.empty()) {
        throw Error("evaluate: empty truth or prediction stream");
    }

    nlohmann::json per_example = nlohmann::json::array();
    std::vector<std::pair<std::vector<double>, std::vector<int>>> ap_inputs;
    double speedup_sum = 0.0;
    int speedup_count = 0;
    int matched = 0;

    std::printf("%-16s %8s %6s %8s %10s\n", "example", "sources", "n_out",
                "AP", "speedup");
    for (const auto& p : preds) {
        auto it = truth_by_id.find(p.example_id);
        if (it == truth_by_id.end()) {
            throw Error("id mismatch: prediction '" + p.example_id +
                        "' not present in truth results");
        }
        const RunResult& t = *it->second;
        if (t.scores.empty()) {
            throw Error("truth example '" + t.example_id + "' lacks scores");
        }
        ++matched;

        std::vector<int> relevant =
            esd_outliers(t.scores, EsdConfig{}).outliers;
        ap_inputs.emplace_back(p.scores, relevant);

        nlohmann::json row;
        row["id"] = p.example_id;
        row["n_out"] = relevant.size();
        if (relevant.empty()) {
            row["ap"] = nullptr;
            std::printf("%-16s %8d %6zu %8s", p.example_id.c_str(),
                        p.num_sources, relevant.size(), "-");
        } else {
            double ap = average_precision(p.scores, relevant);
            row["ap"] = ap;
            std::printf("%-16s %8d %6zu %8.4f", p.example_id.c_str(),
                        p.num_sources, relevant.size(), ap);
        }
        if (p.counted > 0.0) {
            double speedup = t.counted / p.counted;
            row["speedup"] = speedup;
            speedup_sum += speedup;
            ++speedup_count;
            std::printf(" %10.2f\n", speedup);
        } else {
            row["speedup"] = nullptr;
            std::printf(" %10s\n", "-");
        }
        per_example.push_back(row);
    }
    if (matched == 0) {
        throw Error("evaluate: no overlapping example ids");
    }

    MeanApResult map_result = mean_ap(ap_inputs);

    nlohmann::json report;
    report["map"] = map_result.map;
    report["evaluated"] = map_result.evaluated;
    report["skipped_no_outliers"] = map_result.skipped;
    if (speedup_count > 0) {
        report["mean_speedup"] = speedup_sum / speedup_count;
    } else {
        report["mean_speedup"] = nullptr;
    }
    report["examples"] = per_example;

    std::printf("%-16s %8s %6s %8.4f", "mAP", "", "", map_result.map);
    if (speedup_count > 0) {
        std::printf(" %10.2f\n", speedup_sum / speedup_count);
    } else {
        std::printf(" %10s\n", "-");
    }
    if (map_result.skipped > 0) {
        std::printf("(%d example(s) skipped: no truth outliers)\n",
                    map_result.skipped);
    }

    std::ofstream os(cfg.out_path, std::ios::binary);
    if (!os) throw Error("cannot open report file: " + cfg.out_path);
    os << report.dump(2) << "\n";
    return 0;
}

} // namespace attribot
