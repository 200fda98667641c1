#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "attribot/errors.hpp"
#include "attribot/io.hpp"
#include "attribot/model.hpp"

using namespace attribot;
namespace fs = std::filesystem;

namespace {

struct Scratch {
    fs::path dir;
    Scratch() {
        dir = fs::temp_directory_path() /
              ("attribot_io_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }
    std::string operator()(const std::string& name) const {
        return (dir / name).string();
    }
};

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    os << text;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string make_model(const Scratch& scratch, const std::string& name,
                       uint64_t seed, int d_model = 16, int max_seq = 512) {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_model = d_model;
    c.d_ff = 2 * d_model;
    c.vocab = 258;
    c.max_seq = max_seq;
    std::string path = scratch(name);
    save_model(init_reference_model(c, seed), path);
    return path;
}

} // namespace

TEST_CASE("load_dataset parses records") {
    Scratch scratch;
    std::string path = scratch("data.jsonl");
    write_file(path,
               R"({"id":"e1","query":"q","context":[["a","b"],["c"]]})"
               "\n");
    DatasetLoadResult r = load_dataset(path);
    REQUIRE(r.examples.size() == 1);
    CHECK(r.examples[0].id == "e1");
    CHECK(r.examples[0].partition.num_groups() == 2);
    CHECK(r.examples[0].partition.num_sources() == 3);
    CHECK_FALSE(r.examples[0].response.has_value());
    CHECK(r.warnings.empty());
}

TEST_CASE("load_dataset warns on duplicated sources but keeps the example") {
    Scratch scratch;
    std::string path = scratch("dup.jsonl");
    write_file(path,
               R"({"id":"e1","query":"q","context":[["same"],["same"]]})"
               "\n");
    DatasetLoadResult r = load_dataset(path);
    CHECK(r.examples.size() == 1);
    REQUIRE(r.warnings.size() == 1);
    CHECK(r.warnings[0].find("e1") != std::string::npos);
}

TEST_CASE("load_dataset empty file yields an empty dataset") {
    Scratch scratch;
    std::string path = scratch("empty.jsonl");
    write_file(path, "");
    DatasetLoadResult r = load_dataset(path);
    CHECK(r.examples.empty());
}

TEST_CASE("load_dataset reports the failing line number") {
    Scratch scratch;
    std::string path = scratch("bad.jsonl");
    write_file(path,
               R"({"id":"e1","query":"q","context":[["a"]]})"
               "\n{not json\n");
    try {
        load_dataset(path);
        FAIL("expected a parse error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("load_dataset rejects structural problems") {
    Scratch scratch;
    std::string path = scratch("bad2.jsonl");
    SUBCASE("empty context") {
        write_file(path, R"({"id":"e1","query":"q","context":[]})" "\n");
        CHECK_THROWS_AS(load_dataset(path), Error);
    }
    SUBCASE("empty source") {
        write_file(path, R"({"id":"e1","query":"q","context":[[""]]})" "\n");
        CHECK_THROWS_AS(load_dataset(path), Error);
    }
    SUBCASE("duplicate id") {
        write_file(path,
                   R"({"id":"e1","query":"q","context":[["a"]]})"
                   "\n"
                   R"({"id":"e1","query":"q","context":[["b"]]})"
                   "\n");
        CHECK_THROWS_AS(load_dataset(path), Error);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_dataset(scratch("nope.jsonl")), Error);
    }
}

TEST_CASE("RunResult JSON round-trip is lossless") {
    std::mt19937_64 rng(8);
    auto u = [&]() { return double(rng() >> 11) * 0x1.0p-53; };
    for (int it = 0; it < 25; ++it) {
        RunResult r;
        r.example_id = "ex" + std::to_string(it);
        r.method = it % 2 ? "kv" : "contextcite";
        r.params = {{"alpha", u()}, {"n", int(rng() % 100)}};
        int n = 1 + int(rng() % 8);
        for (int i = 0; i < n; ++i) r.scores.push_back(u() * 20.0 - 10.0);
        if (n >= 3) r.outliers = {0, n - 1};
        for (int i = 0; i < 5; ++i) r.response_tokens.push_back(Token(rng() % 256));
        StageCost st;
        st.stage = "kv";
        st.model_id = "m";
        st.model_params = double(rng() % 10000);
        st.passes = double(n);
        st.base_passes = 1;
        st.uncached_tokens = u() * 1000;
        st.cached_tokens = u() * 1000;
        st.base_uncached_tokens = 17;
        r.cost.stages.push_back(st);
        r.counted = u() * 1e9;
        if (it % 3 == 0) r.theoretical = u() * 1e9;
        r.seed = rng();
        r.response_source = it % 2 ? "dataset" : "greedy(max_new=4)";
        r.model_id = "model-x";
        r.proxy_model_id = it % 2 ? "proxy-y" : "";
        r.num_sources = n;

        RunResult back = RunResult::from_json(r.to_json());
        CHECK(back.example_id == r.example_id);
        CHECK(back.method == r.method);
        CHECK(back.params == r.params);
        CHECK(back.scores == r.scores);
        CHECK(back.outliers == r.outliers);
        CHECK(back.response_tokens == r.response_tokens);
        CHECK(back.counted == r.counted);
        CHECK(back.theoretical == r.theoretical);
        CHECK(back.seed == r.seed);
        CHECK(back.response_source == r.response_source);
        CHECK(back.model_id == r.model_id);
        CHECK(back.proxy_model_id == r.proxy_model_id);
        CHECK(back.num_sources == r.num_sources);
        REQUIRE(back.cost.stages.size() == 1);
        CHECK(back.cost.stages[0].stage == st.stage);
        CHECK(back.cost.stages[0].model_params == st.model_params);
        CHECK(back.cost.stages[0].uncached_tokens == st.uncached_tokens);
        CHECK(back.cost.stages[0].cached_tokens == st.cached_tokens);
    }
}

TEST_CASE("invalid UTF-8 responses survive as token arrays") {
    RunResult r;
    r.example_id = "x";
    r.method = "loo";
    r.response_tokens = {0xff, 0xfe, 65}; // not valid UTF-8
    nlohmann::json j = r.to_json();
    CHECK(j.at("response_tokens") == nlohmann::json({255, 254, 65}));
    RunResult back = RunResult::from_json(j);
    CHECK(back.response_tokens == r.response_tokens);
    CHECK_NOTHROW(j.dump());
}

TEST_CASE("run_attribute end to end") {
    Scratch scratch;
    std::string model = make_model(scratch, "m.bin", 7);
    std::string data = scratch("d.jsonl");
    write_file(data,
               R"({"id":"e1","query":"pick one","context":[["aa","bb"],["cc"]],"response":"aa"})"
               "\n"
               R"({"id":"e2","query":"other","context":[["xx","yy","zz"]]})"
               "\n");

    AttributeConfig cfg;
    cfg.model_path = model;
    cfg.dataset_path = data;
    cfg.method = "loo";
    cfg.out_path = scratch("loo.jsonl");
    cfg.max_new = 4;
    cfg.seed = 3;
    REQUIRE(run_attribute(cfg) == 0);

    auto results = read_results(cfg.out_path);
    REQUIRE(results.size() == 2);
    CHECK(results[0].example_id == "e1");
    CHECK(results[0].scores.size() == 3);
    CHECK(results[0].response_tokens == tokenize("aa"));
    CHECK(results[0].response_source == "dataset");
    CHECK(results[0].seed == 3);
    CHECK(results[1].scores.size() == 3);
    CHECK(results[1].response_source == "greedy(max_new=4)");
    // e2's response was generated.
    CHECK(results[1].response_tokens.size() <= 4);
    CHECK(results[1].response_tokens.size() >= 1);
    CHECK(fs::exists(cfg.out_path + ".meta.json"));

    SUBCASE("kv agrees with loo within 1e-4") {
        AttributeConfig kv = cfg;
        kv.method = "kv";
        kv.out_path = scratch("kv.jsonl");
        REQUIRE(run_attribute(kv) == 0);
        auto kv_results = read_results(kv.out_path);
        REQUIRE(kv_results.size() == 2);
        for (size_t e = 0; e < 2; ++e) {
            REQUIRE(kv_results[e].scores.size() == results[e].scores.size());
            for (size_t i = 0; i < results[e].scores.size(); ++i) {
                CHECK(std::abs(kv_results[e].scores[i] -
                               results[e].scores[i]) <= 1e-4);
            }
            // Same generated response feeds both methods.
            CHECK(kv_results[e].response_tokens == results[e].response_tokens);
        }
    }

    SUBCASE("pipeline metadata echoes the spec") {
        std::string spec_path = scratch("spec.json");
        write_file(spec_path,
                   R"({"stages":["kv","proxy","hierarchical"],"beta":0.5})");
        AttributeConfig pl = cfg;
        pl.method = "pipeline";
        pl.pipeline_spec_path = spec_path;
        pl.proxy_model_path = make_model(scratch, "p.bin", 8);
        pl.out_path = scratch("pl.jsonl");
        REQUIRE(run_attribute(pl) == 0);
        auto pl_results = read_results(pl.out_path);
        REQUIRE(pl_results.size() == 2);
        CHECK(pl_results[0].params["stages"] ==
              nlohmann::json({"kv", "proxy", "hierarchical"}));
        CHECK(pl_results[0].params["beta"] == 0.5);
        CHECK(pl_results[0].method == "pipeline");
    }
}

TEST_CASE("run_attribute is deterministic byte for byte") {
    Scratch scratch;
    std::string model = make_model(scratch, "m.bin", 11);
    std::string data = scratch("d.jsonl");
    write_file(data,
               R"({"id":"a","query":"q1","context":[["one","two","three"]]})"
               "\n"
               R"({"id":"b","query":"q2","context":[["x","y"],["z"]]})"
               "\n");

    AttributeConfig cfg;
    cfg.model_path = model;
    cfg.dataset_path = data;
    cfg.method = "contextcite"; // exercises the seeded sampler
    cfg.cc_n = 16;
    cfg.seed = 42;
    cfg.max_new = 3;
    cfg.workers = 2;

    cfg.out_path = scratch("r1.jsonl");
    REQUIRE(run_attribute(cfg) == 0);
    cfg.out_path = scratch("r2.jsonl");
    REQUIRE(run_attribute(cfg) == 0);
    CHECK(read_file(scratch("r1.jsonl")) == read_file(scratch("r2.jsonl")));
    CHECK_FALSE(read_file(scratch("r1.jsonl")).empty());
}

TEST_CASE("run_attribute failure handling") {
    Scratch scratch;
    // Tiny max_seq so the long example overflows the model.
    std::string model = make_model(scratch, "m.bin", 3, 16, 112);
    std::string data = scratch("d.jsonl");
    std::string long_source(200, 'w');
    write_file(data,
               R"({"id":"ok","query":"q","context":[["aa","bb"]],"response":"r"})"
               "\n" +
                   std::string(R"({"id":"long","query":"q","context":[[")") +
                   long_source + R"("]],"response":"r"})" + "\n");

    AttributeConfig cfg;
    cfg.model_path = model;
    cfg.dataset_path = data;
    cfg.method = "loo";
    cfg.out_path = scratch("out.jsonl");

    SUBCASE("default: nonzero exit on failure") {
        CHECK(run_attribute(cfg) != 0);
    }
    SUBCASE("--keep-going: zero exit, good examples written") {
        cfg.keep_going = true;
        CHECK(run_attribute(cfg) == 0);
        auto results = read_results(cfg.out_path);
        REQUIRE(results.size() == 1);
        CHECK(results[0].example_id == "ok");
    }
}

TEST_CASE("run_attribute on an empty dataset succeeds with empty output") {
    Scratch scratch;
    std::string model = make_model(scratch, "m.bin", 1);
    write_file(scratch("empty.jsonl"), "");
    AttributeConfig cfg;
    cfg.model_path = model;
    cfg.dataset_path = scratch("empty.jsonl");
    cfg.method = "loo";
    cfg.out_path = scratch("out.jsonl");
    CHECK(run_attribute(cfg) == 0);
    CHECK(read_results(cfg.out_path).empty());
}

TEST_CASE("run_attribute rejects bad configurations") {
    Scratch scratch;
    std::string model = make_model(scratch, "m.bin", 1);
    std::string data = scratch("d.jsonl");
    write_file(data, R"({"id":"e","query":"q","context":[["a"]]})" "\n");

    AttributeConfig cfg;
    cfg.model_path = model;
    cfg.dataset_path = data;
    cfg.out_path = scratch("o.jsonl");

    cfg.method = "warp";
    CHECK(run_attribute(cfg) == 2);
    cfg.method = "proxy"; // missing --proxy-model
    CHECK(run_attribute(cfg) == 2);
    cfg.method = "pipeline"; // missing spec
    CHECK(run_attribute(cfg) == 2);
}

TEST_CASE("run_evaluate") {
    Scratch scratch;

    // Truth with one clear outlier per example.
    auto make_truth = [&](const std::string& id, int n, int hot) {
        RunResult t;
        t.example_id = id;
        t.method = "loo";
        t.num_sources = n;
        for (int i = 0; i < n; ++i) {
            t.scores.push_back(i == hot ? 50.0 : 0.01 * i);
        }
        StageCost st;
        st.stage = "loo";
        st.model_params = 100;
        st.uncached_tokens = 1000;
        t.cost.stages.push_back(st);
        t.counted = 2.0 * 100 * 1000;
        return t;
    };

    RunResult t1 = make_truth("e1", 6, 0);
    RunResult t2 = make_truth("e2", 5, 2);
    write_results({t1, t2}, scratch("truth.jsonl"));

    SUBCASE("candidate equal to truth scores mAP 1.0") {
        write_results({t1, t2}, scratch("pred.jsonl"));
        EvaluateConfig ecfg{scratch("truth.jsonl"), scratch("pred.jsonl"),
                            scratch("report.json")};
        REQUIRE(run_evaluate(ecfg) == 0);
        nlohmann::json report;
        std::ifstream(scratch("report.json")) >> report;
        CHECK(report["map"] == doctest::Approx(1.0));
        CHECK(report["evaluated"] == 2);
        CHECK(report["mean_speedup"] == doctest::Approx(1.0));
    }

    SUBCASE("reversed candidate ranks the lone outlier last: AP = 1/|C|") {
        RunResult p1 = t1;
        for (int i = 0; i < p1.num_sources; ++i) {
            p1.scores[i] = -t1.scores[i];
        }
        p1.method = "kv";
        p1.counted = t1.counted / 2.0;
        write_results({p1}, scratch("pred.jsonl"));
        EvaluateConfig ecfg{scratch("truth.jsonl"), scratch("pred.jsonl"),
                            scratch("report.json")};
        REQUIRE(run_evaluate(ecfg) == 0);
        nlohmann::json report;
        std::ifstream(scratch("report.json")) >> report;
        CHECK(report["map"] == doctest::Approx(1.0 / 6.0));
        CHECK(report["mean_speedup"] == doctest::Approx(2.0));
    }

    SUBCASE("disjoint ids are an error") {
        RunResult p;
        p.example_id = "unknown";
        p.method = "kv";
        p.scores = {1.0, 2.0};
        p.num_sources = 2;
        write_results({p}, scratch("pred.jsonl"));
        EvaluateConfig ecfg{scratch("truth.jsonl"), scratch("pred.jsonl"),
                            scratch("report.json")};
        CHECK_THROWS_AS(run_evaluate(ecfg), Error);
    }

    SUBCASE("truth without scores is an error") {
        RunResult bare = t1;
        bare.scores.clear();
        write_results({bare}, scratch("truth2.jsonl"));
        write_results({t1}, scratch("pred.jsonl"));
        EvaluateConfig ecfg{scratch("truth2.jsonl"), scratch("pred.jsonl"),
                            scratch("report.json")};
        CHECK_THROWS_AS(run_evaluate(ecfg), Error);
    }
}
