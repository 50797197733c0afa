// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "debias/alignment.hpp"
#include "debias/corpus.hpp"
#include "debias/encoder.hpp"

namespace debias {

struct TrainConfig {
    int epochs = 4;
    double learning_rate = 5e-3;  // toy-encoder default
    double lambda = 1.0;
    int batch_size = 8;
    int knn_k = 5;
    double keep_fraction_align = 0.5;
    double temperature = 1.0;
    double temperature_s = 1.0;
    uint64_t seed = 0;
    bool random_neighbors = false;  // ablation: random groups, uniform weights

    void validate() const;
};

struct TrainLogRow {
    int epoch = 0;
    double loss_bias = 0.0;    // mean per anchor
    double loss_repr = 0.0;    // mean per batch
    double loss_total = 0.0;   // mean per batch
    double mean_d = 0.0;       // mean D over the kept groups, current model
    double heldout_ppl = 0.0;  // 0 when no held-out set was given
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
};

void write_train_log_csv(const TrainLog& log, const std::string& path);
void write_train_log_json(const TrainLog& log, const std::string& path);

double total_loss(double loss_bias, double loss_repr, double lambda);

// Frozen final-layer states of the reference model, cached per sentence.
class FrozenStateCache {
  public:
    explicit FrozenStateCache(const EncoderModel& frozen) : frozen_(&frozen) {}
    const Mat& states(const std::string& text);

  private:
    const EncoderModel* frozen_;
    std::unordered_map<std::string, Mat> cache_;
};

// KNN-weighted bias loss over a set of anchors, evaluated with `model`.
double loss_bias_value(const EncoderModel& model, const Corpus& corpus,
                       const std::vector<std::string>& anchor_ids, const NeighborhoodMap& hoods,
                       const WordLists& lists, double temperature);

// Mean squared difference between the two models' final-layer states over
// all token-state entries of `sentences`.
double loss_repr_value(const EncoderModel& model, const EncoderModel& frozen,
                       const std::vector<std::string>& sentences);

// One mini-batch of the combined loss L_b + lambda * L_r on a fresh tape.
// The representation loss covers every sentence the bias loss touched
// (anchor and neighbor variants alike).
struct BatchLoss {
    Tape tape;
    BoundParams bound;
    Tape::NodeId loss = -1;
    double bias_value = 0.0;
    double repr_value = 0.0;
    double total_value = 0.0;
};

BatchLoss build_batch_loss(const EncoderModel& model, FrozenStateCache& frozen_states,
                           const Corpus& corpus, const std::vector<std::string>& anchor_ids,
                           const NeighborhoodMap& hoods, const WordLists& lists,
                           double temperature, double lambda);

// Mini-batch SGD over the kept groups. Epoch 0 logs the starting point;
// rows 1..epochs log state after each epoch. epochs == 0 returns an empty
// log and leaves the model untouched.
TrainLog train(EncoderModel& model, const EncoderModel& frozen, const Corpus& corpus,
               const std::vector<std::string>& kept_ids, const NeighborhoodMap& hoods,
               const TrainConfig& cfg, const std::vector<std::string>& heldout_sentences);

}  // namespace debias
