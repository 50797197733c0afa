// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "debias/encoder.hpp"
#include "debias/llm_gen.hpp"
#include "debias/metrics.hpp"
#include "debias/training.hpp"

namespace debias {

// Pipeline settings, read from a key = value config file. Every key can be
// overridden on the command line via --set key=value.
struct PipelineConfig {
    uint64_t seed = 42;
    std::string output_dir = "out";
    std::string word_lists = "data/word_lists.json";
    std::string corpus;    // external corpus JSONL when gen.enabled = false
    std::string pronouns;  // optional pronoun map path; builtin table otherwise
    int max_groups = 0;    // 0 = no cap
    double heldout_fraction = 0.1;

    bool gen_enabled = true;
    GenerationConfig gen;

    bool tox_enabled = true;
    double tox_keep_fraction = 0.6;
    std::string tox_scores;  // optional JSONL {"group_id","toxicity":[...]}

    EncoderConfig encoder;
    PretrainConfig pretrain;

    int align_k = 5;
    double align_keep_fraction = 0.5;
    double align_temperature = 1.0;
    double align_temperature_s = 1.0;
    bool random_neighbors = false;  // ablation: random neighbors, uniform weights

    int train_epochs = 4;
    double train_learning_rate = 5e-3;
    double train_lambda = 1.0;
    int train_batch_size = 8;

    std::string metrics_seat = "data/seat_gender.json";
    std::string metrics_stereoset = "data/stereoset_gender.jsonl";
    std::string metrics_crows = "data/crows_gender.jsonl";
    bool metrics_projection = true;

    std::vector<int> sweep_sizes;

    void set(const std::string& key, const std::string& value);
    static PipelineConfig from_file(const std::string& path);

    std::string artifact(const std::string& name) const { return output_dir + "/" + name; }
};

void stage_generate(const PipelineConfig& cfg);
void stage_ingest(const PipelineConfig& cfg);
void stage_tox_filter(const PipelineConfig& cfg);
void stage_pretrain(const PipelineConfig& cfg);
void stage_align(const PipelineConfig& cfg);
void stage_debias(const PipelineConfig& cfg);
void stage_eval(const PipelineConfig& cfg, const std::string& checkpoint_name,
                const std::string& tag);
void stage_report(const PipelineConfig& cfg);
void stage_sweep(const PipelineConfig& cfg);

struct PipelineResult {
    BiasReport before;
    BiasReport after;
};

// Runs every enabled stage in order through the same on-disk artifacts the
// individual subcommands use.
PipelineResult run_pipeline(const PipelineConfig& cfg);

}  // namespace debias
