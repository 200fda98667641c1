// attribot: leave-one-out context attribution toolkit.
//
// Subcommands:
//   gen-model  write a deterministic reference model file
//   attribute  score every source of every dataset example
//   evaluate   compare a result stream against exact-LOO truth
//   flops      print closed-form cost estimates for a method

#include <cstdio>
#include <exception>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "attribot/errors.hpp"
#include "attribot/evaluation.hpp"
#include "attribot/io.hpp"
#include "attribot/model.hpp"

namespace {

int cmd_gen_model(const attribot::ModelConfig& config, uint64_t seed,
                  const std::string& out, bool zero) {
    config.validate();
    attribot::ModelWeights w =
        zero ? attribot::init_zero_model(config)
             : attribot::init_reference_model(config, seed);
    attribot::save_model(w, out);
    std::printf("wrote %s (%lld parameters)\n", out.c_str(),
                static_cast<long long>(w.param_count()));
    return 0;
}

int cmd_flops(const std::string& method_name, const attribot::FlopsParams& p) {
    attribot::FlopsMethod method =
        attribot::flops_method_from_string(method_name);
    attribot::FlopsEstimate est = attribot::theoretical_flops(method, p);
    double loo =
        attribot::theoretical_flops(attribot::FlopsMethod::loo, p).flops;
    std::printf("%-14s %18s %18s\n", "method", "flops", "speedup_vs_loo");
    std::printf("%-14s %18.6g %18.6g\n", attribot::to_string(method).c_str(),
                est.flops, est.speedup_over_loo);
    std::printf("%-14s %18.6g %18.6g\n", "loo", loo, 1.0);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"leave-one-out context attribution toolkit"};
    app.require_subcommand(1);

    // gen-model
    auto* gen = app.add_subcommand("gen-model",
                                   "write a deterministic reference model");
    attribot::ModelConfig config;
    uint64_t gen_seed = 0;
    std::string gen_out;
    bool gen_zero = false;
    gen->add_option("--layers", config.layers, "transformer layers");
    gen->add_option("--heads", config.heads, "attention heads");
    gen->add_option("--dmodel", config.d_model, "model width");
    gen->add_option("--dff", config.d_ff, "feed-forward width");
    gen->add_option("--vocab", config.vocab, "vocab size (>= 258)");
    gen->add_option("--max-seq", config.max_seq, "max sequence length");
    gen->add_option("--seed", gen_seed, "weight seed");
    gen->add_option("--out", gen_out, "output model file")->required();
    gen->add_flag("--zero", gen_zero, "all-zero weights");

    // attribute
    auto* attr = app.add_subcommand("attribute",
                                    "compute per-source attribution scores");
    attribot::AttributeConfig acfg;
    attr->add_option("--model", acfg.model_path, "target model file")
        ->required();
    attr->add_option("--method", acfg.method,
                     "loo|kv|hier|proxy|prune|pipeline|attention|gradnorm|"
                     "embedsim|contextcite")
        ->required();
    attr->add_option("--dataset", acfg.dataset_path, "JSONL dataset")
        ->required();
    attr->add_option("--out", acfg.out_path, "output results JSONL")
        ->required();
    attr->add_option("--proxy-model", acfg.proxy_model_path,
                     "proxy model file (proxy/prune/pipeline)");
    attr->add_option("--alpha", acfg.alpha, "fraction of sources kept");
    attr->add_option("--beta", acfg.beta, "fraction of groups kept");
    attr->add_option("--min-keep", acfg.min_keep,
                     "minimum spans kept by hier/prune");
    attr->add_option("--pipeline", acfg.pipeline_spec_path,
                     "pipeline spec JSON file");
    attr->add_option("--seed", acfg.seed, "run seed");
    attr->add_option("--max-new", acfg.max_new,
                     "max generated response tokens");
    attr->add_option("--template", acfg.template_path,
                     "prompt template file ({context}, {question})");
    attr->add_option("--separator", acfg.separator,
                     "source separator in prompts");
    attr->add_option("--workers", acfg.workers,
                     "worker threads (default: ATTRIBOT_WORKERS or cores)");
    attr->add_flag("--keep-going", acfg.keep_going,
                   "continue past failing examples");
    attr->add_option("--cc-n", acfg.cc_n, "contextcite ablation count");
    attr->add_option("--cc-p", acfg.cc_p, "contextcite keep probability");
    attr->add_option("--cc-lambda", acfg.cc_lambda,
                     "contextcite lasso penalty (<0: auto)");
    attr->add_option("--cc-scale", acfg.cc_scale,
                     "contextcite target scale: logit|log");

    // evaluate
    auto* eval = app.add_subcommand("evaluate",
                                    "evaluate results against exact LOO");
    attribot::EvaluateConfig ecfg;
    eval->add_option("--truth", ecfg.truth_path, "exact-LOO results JSONL")
        ->required();
    eval->add_option("--pred", ecfg.pred_path, "candidate results JSONL")
        ->required();
    eval->add_option("--out", ecfg.out_path, "JSON report path")->required();

    // flops
    auto* flops = app.add_subcommand("flops",
                                     "closed-form cost of a method");
    std::string flops_method;
    attribot::FlopsParams fp;
    fp.target_params = 1.0;
    fp.tokens_per_source = 1.0;
    fp.num_sources = 1.0;
    flops->add_option("--method", flops_method,
                      "loo|kv|proxy|prune|hierarchical")
        ->required();
    flops->add_option("--P", fp.target_params, "target model parameters")
        ->required();
    flops->add_option("--Pprime", fp.proxy_params, "proxy model parameters");
    flops->add_option("--T", fp.tokens_per_source, "tokens per source")
        ->required();
    flops->add_option("--C", fp.num_sources, "number of sources")->required();
    flops->add_option("--H", fp.sources_per_group, "sources per group");
    flops->add_option("--alpha", fp.alpha, "fraction of sources kept");
    flops->add_option("--beta", fp.beta, "fraction of groups kept");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_model(config, gen_seed, gen_out,
                                                gen_zero);
        if (attr->parsed()) return attribot::run_attribute(acfg);
        if (eval->parsed()) return attribot::run_evaluate(ecfg);
        if (flops->parsed()) return cmd_flops(flops_method, fp);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
