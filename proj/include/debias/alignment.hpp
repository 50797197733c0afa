// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "debias/corpus.hpp"
#include "debias/encoder.hpp"
#include "debias/mat.hpp"

namespace debias {

// Jensen-Shannon divergence between two probability vectors. Natural log,
// 0*log(0/.) treated as 0. Inputs must be equal length, non-negative, and
// normalized within 1e-9.
double jsd(const std::vector<double>& p, const std::vector<double>& q);

// The fixed neutral template that hosts target prototypes.
std::string target_template(const std::string& word);

// Contextual representation of each target word inside its template.
std::vector<Mat> target_prototypes(const EncoderModel& model, const WordLists& lists);

// softmax of cosine scores divided by temperature.
std::vector<double> distribution_from_cosines(std::vector<double> cosines, double temperature);

// softmax_m( cos(attr-in-context, target_m-in-template) / temperature ).
std::vector<double> target_distribution(const EncoderModel& model, const std::string& text,
                                        const std::string& attribute_word, const WordLists& lists,
                                        double temperature);

// Bias measure D: sum over variant pairs i<j of the JSD between their
// target distributions. Zero means the group treats every attribute alike.
double bias_measure(const EncoderModel& model, const PairwiseGroup& group, const WordLists& lists,
                    double temperature);

// Anchor plus its K nearest neighbors under cosine similarity, with
// softmax weights over {1, cos_1, ..., cos_K} / temperature_s. weights[0]
// always belongs to the anchor and is maximal.
struct KnnNeighborhood {
    std::string anchor_id;
    std::vector<std::string> neighbor_ids;  // [0] == anchor_id
    std::vector<double> weights;            // sums to 1
};

using NeighborhoodMap = std::map<std::string, KnnNeighborhood>;

// Group embedding: mean over the d variants' mean-pooled sentence vectors,
// computed with the frozen reference model.
std::map<std::string, Mat> group_embeddings(const EncoderModel& frozen, const Corpus& corpus);

NeighborhoodMap build_knn(const std::map<std::string, Mat>& embeddings, int k,
                          double temperature_s);

// Ablation stand-in: seeded random neighbors with uniform weights.
NeighborhoodMap random_neighborhoods(const std::vector<std::string>& group_ids, int k,
                                     uint64_t seed);

struct AlignmentRow {
    std::string group_id;
    double delta = 0.0;
    std::vector<std::string> neighbors;
    std::vector<double> weights;
    bool kept = false;
};

struct AlignmentReport {
    double delta_total = 0.0;
    std::vector<AlignmentRow> rows;  // sorted by group_id
    double keep_fraction = 0.0;
    int k = 0;

    std::vector<std::string> kept_ids() const;
    std::vector<std::string> filtered_ids() const;
    const AlignmentRow& row(const std::string& group_id) const;
};

// delta(n) = sum_k D(neighbor k) * weight_k under the frozen model;
// delta_total is the sum over all groups.
AlignmentReport causal_effect(const EncoderModel& frozen, const Corpus& corpus,
                              const NeighborhoodMap& hoods, const WordLists& lists,
                              double temperature);

// Marks the ceil(keep_fraction * N) groups with the largest delta as kept
// (ties by group_id), the rest as filtered.
void select_aligned(AlignmentReport& report, double keep_fraction);

nlohmann::ordered_json alignment_report_to_json(const AlignmentReport& report);
AlignmentReport alignment_report_from_json(const nlohmann::json& j);
void save_alignment_report(const AlignmentReport& report, const std::string& path);
AlignmentReport load_alignment_report(const std::string& path);

// Rebuilds the neighborhood map stored in a report.
NeighborhoodMap neighborhoods_from_report(const AlignmentReport& report);

}  // namespace debias
