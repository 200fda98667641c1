#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attribot/accel.hpp"
#include "attribot/attribution.hpp"
#include "attribot/context.hpp"

namespace attribot {

// Dataset files are UTF-8 JSON lines, one record per line:
//   {"id": "...", "query": "...", "response": "...", (optional)
//    "context": [["source", ...], ...]}              (groups of sources)
struct DatasetLoadResult {
    std::vector<Example> examples;
    std::vector<std::string> warnings; // e.g. duplicated source texts
};

DatasetLoadResult load_dataset(const std::string& path,
                               const std::string& separator = "\n");

// One attribution run over one example. Serializes deterministically:
// wall-clock time is excluded (it lives in the run's metadata sidecar), and
// the response is carried as a token array (generated responses need not be
// valid UTF-8; response_text is best-effort for humans).
struct RunResult {
    std::string example_id;
    std::string method;
    nlohmann::json params = nlohmann::json::object();
    std::vector<double> scores;
    std::vector<int> outliers; // ESD outliers of the scores, when computable
    TokenSeq response_tokens;
    CostRecord cost;
    double counted = 0.0; // counted FLOPs
    std::optional<double> theoretical; // closed-form FLOPs, when defined
    uint64_t seed = 0;           // run seed (per-example seeds derive from it)
    std::string response_source; // "dataset" or "greedy(max_new=N)"
    std::string model_id;
    std::string proxy_model_id;
    int num_sources = 0;

    nlohmann::json to_json() const;
    static RunResult from_json(const nlohmann::json& j);
};

std::vector<RunResult> read_results(const std::string& path);
void write_results(const std::vector<RunResult>& results,
                   const std::string& path);

struct AttributeConfig {
    std::string model_path;
    std::string proxy_model_path; // required by proxy-based methods
    std::string method;           // loo kv hier proxy prune pipeline
                                  // attention gradnorm embedsim contextcite
    std::string dataset_path;
    std::string out_path;
    std::string pipeline_spec_path; // JSON file, method=pipeline only
    std::string template_path;      // optional prompt template override
    std::string separator = "\n";

    double alpha = 0.5;
    double beta = 0.5;
    int min_keep = 3; // retaining at least ~3 spans is generally enough
    int max_new = 32;
    uint64_t seed = 0;
    bool keep_going = false;
    int workers = 0; // 0: ATTRIBOT_WORKERS env var, then hardware cores

    int cc_n = 256;
    double cc_p = 0.5;
    double cc_lambda = -1.0; // < 0: data-driven default
    std::string cc_scale = "logit";
};

// Runs attribution over every dataset example (in parallel, output in input
// order), writes one RunResult JSON line per example plus a metadata
// sidecar at <out>.meta.json. Returns a process exit code.
int run_attribute(const AttributeConfig& config);

struct EvaluateConfig {
    std::string truth_path; // exact-LOO results
    std::string pred_path;
    std::string out_path;   // JSON report
};

// Scores every prediction against the ESD outliers of the matching truth
// scores (AP per example, mAP aggregate) and reports the counted-FLOPs
// speedup. Prints an aligned table to stdout and writes the JSON report.
int run_evaluate(const EvaluateConfig& config);

} // namespace attribot
