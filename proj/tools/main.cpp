// SPDX-License-Identifier: Apache-2.0
//
// Pipeline driver: generate -> ingest -> tox-filter -> pretrain -> align ->
// debias -> eval -> report, each stage also invocable on its own.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "debias/errors.hpp"
#include "debias/pipeline.hpp"

namespace {

debias::PipelineConfig make_config(const std::string& config_path,
                                   const std::vector<std::string>& overrides) {
    debias::PipelineConfig cfg;
    if (!config_path.empty()) cfg = debias::PipelineConfig::from_file(config_path);
    for (const auto& kv : overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            throw debias::ConfigError("--set expects key=value, got '" + kv + "'");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

void print_report_line(const char* tag, const debias::BiasReport& r) {
    std::printf("%-7s seat=%+.4f lm=%.2f ss=%.2f icat=%.2f crows=%.2f mean_d=%.6f ppl=%.3f\n",
                tag, r.seat, r.lm, r.ss, r.icat, r.crows, r.mean_d, r.pseudo_perplexity);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"counterfactual debiasing pipeline for a small masked language model"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_path, "key = value config file");
    app.add_option("-s,--set", overrides, "override a config key (key=value), repeatable");

    std::string eval_checkpoint = "model_pretrained.ckpt";
    std::string eval_tag = "before";

    auto* run = app.add_subcommand("run", "run the full pipeline");
    auto* generate = app.add_subcommand("generate", "generate the pairwise corpus");
    auto* ingest = app.add_subcommand("ingest", "validate and ingest the corpus");
    auto* tox = app.add_subcommand("tox-filter", "drop the most toxic groups");
    auto* pretrain = app.add_subcommand("pretrain", "masked-LM pretraining");
    auto* align = app.add_subcommand("align", "causal-effect estimation and filtering");
    auto* debias_cmd = app.add_subcommand("debias", "fine-tune with the bias loss");
    auto* eval = app.add_subcommand("eval", "score bias metrics for a checkpoint");
    eval->add_option("--checkpoint", eval_checkpoint, "checkpoint artifact name");
    eval->add_option("--tag", eval_tag, "report tag (before/after)");
    auto* report = app.add_subcommand("report", "combine metric reports and curves");
    auto* sweep = app.add_subcommand("sweep", "rerun the pipeline over corpus sizes");

    CLI11_PARSE(app, argc, argv);

    try {
        const debias::PipelineConfig cfg = make_config(config_path, overrides);
        std::filesystem::create_directories(cfg.output_dir);
        if (run->parsed()) {
            const debias::PipelineResult result = debias::run_pipeline(cfg);
            print_report_line("before", result.before);
            print_report_line("after", result.after);
            std::printf("artifacts in %s\n", cfg.output_dir.c_str());
        } else if (generate->parsed()) {
            debias::stage_generate(cfg);
        } else if (ingest->parsed()) {
            debias::stage_ingest(cfg);
        } else if (tox->parsed()) {
            debias::stage_tox_filter(cfg);
        } else if (pretrain->parsed()) {
            debias::stage_pretrain(cfg);
        } else if (align->parsed()) {
            debias::stage_align(cfg);
        } else if (debias_cmd->parsed()) {
            debias::stage_debias(cfg);
        } else if (eval->parsed()) {
            debias::stage_eval(cfg, eval_checkpoint, eval_tag);
        } else if (report->parsed()) {
            debias::stage_report(cfg);
        } else if (sweep->parsed()) {
            debias::stage_sweep(cfg);
        }
    } catch (const debias::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const debias::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const debias::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const debias::TransportError& e) {
        std::cerr << "transport error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
