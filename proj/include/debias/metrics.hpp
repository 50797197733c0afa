// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "debias/corpus.hpp"
#include "debias/encoder.hpp"
#include "debias/mat.hpp"

namespace debias {

struct SeatSpec {
    std::vector<std::string> x;  // target set X sentences
    std::vector<std::string> y;  // target set Y sentences
    std::vector<std::string> a;  // attribute set A sentences
    std::vector<std::string> b;  // attribute set B sentences
};

SeatSpec seat_spec_from_json(const nlohmann::json& j);
SeatSpec load_seat_spec(const std::string& path);

// Effect size over raw embedding vectors:
//   s(w) = mean_a cos(w, a) - mean_b cos(w, b)
//   d    = (mean_X s - mean_Y s) / population-std of s over X u Y.
double seat_effect_size_embeddings(const std::vector<Mat>& x, const std::vector<Mat>& y,
                                   const std::vector<Mat>& a, const std::vector<Mat>& b);

double seat_effect_size(const EncoderModel& model, const SeatSpec& spec);

struct StereoItem {
    std::string id;
    std::string stereotype;
    std::string anti_stereotype;
    std::string unrelated;
};

std::vector<StereoItem> load_stereoset(const std::string& path);

struct StereoScores {
    double lm = 0.0;
    double ss = 0.0;
    double icat = 0.0;
    int ties = 0;
};

double icat(double lm, double ss);

// Sentences compared by length-normalized pseudo-log-likelihood; exact ties
// count 0.5 toward each side.
StereoScores stereoset_scores(const EncoderModel& model, const std::vector<StereoItem>& items);

struct CrowsPair {
    std::string id;
    std::string sent_more;  // stereotypical
    std::string sent_less;  // anti-stereotypical
};

std::vector<CrowsPair> load_crows(const std::string& path);

double crows_score(const EncoderModel& model, const std::vector<CrowsPair>& pairs,
                   int* ties_out = nullptr);

// exp(- sum PLL / sum tokens); 10 for a uniform model over 10 tokens.
double pseudo_perplexity(const EncoderModel& model, const std::vector<std::string>& sentences);

struct ProjectionRow {
    std::string word;
    std::string category;  // "attr<i>" or "target"
    double x = 0.0;
    double y = 0.0;
};

// Top-2 principal-component coordinates of row-vector embeddings, sign
// convention: first nonzero loading positive. Throws NumericError when the
// covariance is degenerate.
std::vector<std::pair<double, double>> pca_2d(const std::vector<Mat>& embeddings);

// Top-2 principal components of word-in-template embeddings.
std::vector<ProjectionRow> project_words(const EncoderModel& model, const WordLists& lists);

void write_projection_csv(const std::vector<ProjectionRow>& rows, const std::string& path);

struct BiasReport {
    double seat = 0.0;
    double lm = 0.0;
    double ss = 0.0;
    double icat = 0.0;
    double crows = 0.0;
    double mean_d = 0.0;
    double pseudo_perplexity = 0.0;
};

nlohmann::ordered_json bias_report_to_json(const BiasReport& r);
BiasReport bias_report_from_json(const nlohmann::json& j);
void save_bias_report(const BiasReport& r, const std::string& path);
BiasReport load_bias_report(const std::string& path);
void write_bias_report_csv(const BiasReport& before, const BiasReport& after,
                           const std::string& path);

}  // namespace debias
