// SPDX-License-Identifier: Apache-2.0
#include "debias/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "debias/alignment.hpp"
#include "debias/errors.hpp"

namespace debias {

namespace {

double cosine_value(const Mat& a, const Mat& b) {
    const double na = norm2(a.row_ptr(0), a.cols);
    const double nb = norm2(b.row_ptr(0), b.cols);
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine of zero-norm vector");
    return dot(a.row_ptr(0), b.row_ptr(0), a.cols) / (na * nb);
}

std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);
    return in;
}

// 1 if a > b, 0 if a < b, 0.5 on an exact tie.
double win(double a, double b, int* ties) {
    if (a > b) return 1.0;
    if (a < b) return 0.0;
    if (ties != nullptr) ++*ties;
    return 0.5;
}

double normalized_pll(const EncoderModel& model, const std::string& text) {
    const size_t tokens = text_to_ids(model, text).size();
    return pseudo_log_likelihood(model, text) / static_cast<double>(tokens);
}

}  // namespace

SeatSpec seat_spec_from_json(const nlohmann::json& j) {
    SeatSpec spec;
    spec.x = j.at("x").get<std::vector<std::string>>();
    spec.y = j.at("y").get<std::vector<std::string>>();
    spec.a = j.at("a").get<std::vector<std::string>>();
    spec.b = j.at("b").get<std::vector<std::string>>();
    if (spec.x.empty() || spec.y.empty() || spec.a.empty() || spec.b.empty()) {
        throw DataError("seat spec: all four sentence sets must be nonempty");
    }
    return spec;
}

SeatSpec load_seat_spec(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("seat spec: invalid JSON in " + path + ": " + e.what());
    }
    return seat_spec_from_json(j);
}

double seat_effect_size_embeddings(const std::vector<Mat>& x, const std::vector<Mat>& y,
                                   const std::vector<Mat>& a, const std::vector<Mat>& b) {
    if (x.empty() || y.empty() || a.empty() || b.empty()) {
        throw DataError("seat: all four embedding sets must be nonempty");
    }
    const auto assoc = [&](const Mat& w) {
        double sa = 0.0;
        for (const Mat& v : a) sa += cosine_value(w, v);
        double sb = 0.0;
        for (const Mat& v : b) sb += cosine_value(w, v);
        return sa / static_cast<double>(a.size()) - sb / static_cast<double>(b.size());
    };

    std::vector<double> s_all;
    double mean_x = 0.0;
    for (const Mat& w : x) {
        const double s = assoc(w);
        mean_x += s;
        s_all.push_back(s);
    }
    mean_x /= static_cast<double>(x.size());
    double mean_y = 0.0;
    for (const Mat& w : y) {
        const double s = assoc(w);
        mean_y += s;
        s_all.push_back(s);
    }
    mean_y /= static_cast<double>(y.size());

    double mean_all = 0.0;
    for (const double s : s_all) mean_all += s;
    mean_all /= static_cast<double>(s_all.size());
    double var = 0.0;
    for (const double s : s_all) var += (s - mean_all) * (s - mean_all);
    var /= static_cast<double>(s_all.size());  // population variance
    if (var <= 0.0) throw NumericError("seat: zero variance of association scores");
    return (mean_x - mean_y) / std::sqrt(var);
}

double seat_effect_size(const EncoderModel& model, const SeatSpec& spec) {
    const auto embed_all = [&](const std::vector<std::string>& sents) {
        std::vector<Mat> out;
        out.reserve(sents.size());
        for (const auto& s : sents) out.push_back(sentence_repr(encode(model, s)));
        return out;
    };
    return seat_effect_size_embeddings(embed_all(spec.x), embed_all(spec.y), embed_all(spec.a),
                                       embed_all(spec.b));
}

std::vector<StereoItem> load_stereoset(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    std::vector<StereoItem> items;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            StereoItem item;
            item.id = j.at("id").get<std::string>();
            item.stereotype = j.at("stereotype").get<std::string>();
            item.anti_stereotype = j.at("anti_stereotype").get<std::string>();
            item.unrelated = j.at("unrelated").get<std::string>();
            items.push_back(std::move(item));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("stereoset fixture line " + std::to_string(line_no) + ": " +
                            e.what());
        }
    }
    if (items.empty()) throw DataError("stereoset fixture empty: " + path);
    return items;
}

double icat(double lm, double ss) { return lm * std::min(ss, 100.0 - ss) / 50.0; }

StereoScores stereoset_scores(const EncoderModel& model, const std::vector<StereoItem>& items) {
    if (items.empty()) throw DataError("stereoset_scores: no items");
    StereoScores out;
    double ss_sum = 0.0;
    double lm_sum = 0.0;
    for (const auto& item : items) {
        const double s = normalized_pll(model, item.stereotype);
        const double a = normalized_pll(model, item.anti_stereotype);
        const double u = normalized_pll(model, item.unrelated);
        ss_sum += win(s, a, &out.ties);
        lm_sum += 0.5 * (win(s, u, &out.ties) + win(a, u, &out.ties));
    }
    out.ss = 100.0 * ss_sum / static_cast<double>(items.size());
    out.lm = 100.0 * lm_sum / static_cast<double>(items.size());
    out.icat = icat(out.lm, out.ss);
    return out;
}

std::vector<CrowsPair> load_crows(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    std::vector<CrowsPair> pairs;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            CrowsPair p;
            p.id = j.at("id").get<std::string>();
            p.sent_more = j.at("sent_more").get<std::string>();
            p.sent_less = j.at("sent_less").get<std::string>();
            pairs.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("crows fixture line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (pairs.empty()) throw DataError("crows fixture empty: " + path);
    return pairs;
}

double crows_score(const EncoderModel& model, const std::vector<CrowsPair>& pairs,
                   int* ties_out) {
    if (pairs.empty()) throw DataError("crows_score: no pairs");
    int ties = 0;
    double wins = 0.0;
    for (const auto& p : pairs) {
        wins += win(normalized_pll(model, p.sent_more), normalized_pll(model, p.sent_less), &ties);
    }
    if (ties_out != nullptr) *ties_out = ties;
    return 100.0 * wins / static_cast<double>(pairs.size());
}

double pseudo_perplexity(const EncoderModel& model, const std::vector<std::string>& sentences) {
    if (sentences.empty()) throw DataError("pseudo_perplexity: no sentences");
    double total_pll = 0.0;
    size_t total_tokens = 0;
    for (const auto& s : sentences) {
        total_pll += pseudo_log_likelihood(model, s);
        total_tokens += text_to_ids(model, s).size();
    }
    return std::exp(-total_pll / static_cast<double>(total_tokens));
}

std::vector<std::pair<double, double>> pca_2d(const std::vector<Mat>& embeddings) {
    const int n = static_cast<int>(embeddings.size());
    if (n < 3) throw DataError("projection: need at least 3 words");
    const int d = embeddings[0].cols;

    Mat centered(n, d);
    for (int j = 0; j < d; ++j) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += embeddings[i].at(0, j);
        mean /= n;
        for (int i = 0; i < n; ++i) centered.at(i, j) = embeddings[i].at(0, j) - mean;
    }
    Mat cov = mm_tn(centered, centered);
    double max_abs = 0.0;
    for (const double v : cov.a) max_abs = std::max(max_abs, std::fabs(v));
    if (max_abs < 1e-15) throw NumericError("projection: degenerate covariance");
    for (double& v : cov.a) v /= n;

    const auto [eigvals, eigvecs] = symmetric_eigen(cov);
    (void)eigvals;
    std::vector<std::pair<double, double>> coords(n);
    for (int pc = 0; pc < 2; ++pc) {
        std::vector<double> axis(eigvecs.row_ptr(pc), eigvecs.row_ptr(pc) + d);
        for (int j = 0; j < d; ++j) {
            if (std::fabs(axis[j]) > 1e-12) {
                if (axis[j] < 0.0) {
                    for (double& v : axis) v = -v;
                }
                break;
            }
        }
        for (int i = 0; i < n; ++i) {
            const double coord = dot(centered.row_ptr(i), axis.data(), d);
            if (pc == 0) {
                coords[i].first = coord;
            } else {
                coords[i].second = coord;
            }
        }
    }
    return coords;
}

std::vector<ProjectionRow> project_words(const EncoderModel& model, const WordLists& lists) {
    std::vector<ProjectionRow> rows;
    std::vector<Mat> embeddings;
    for (const auto& tuple : lists.attribute_tuples) {
        for (size_t i = 0; i < tuple.size(); ++i) {
            rows.push_back({tuple[i], "attr" + std::to_string(i), 0.0, 0.0});
            embeddings.push_back(
                word_in_context_repr(model, target_template(tuple[i]), tuple[i]));
        }
    }
    for (const auto& t : lists.targets) {
        rows.push_back({t, "target", 0.0, 0.0});
        embeddings.push_back(word_in_context_repr(model, target_template(t), t));
    }
    const auto coords = pca_2d(embeddings);
    for (size_t i = 0; i < rows.size(); ++i) {
        rows[i].x = coords[i].first;
        rows[i].y = coords[i].second;
    }
    return rows;
}

void write_projection_csv(const std::vector<ProjectionRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write projection: " + path);
    out << "word,category,x,y\n";
    out.precision(17);
    for (const auto& r : rows) {
        out << r.word << "," << r.category << "," << r.x << "," << r.y << "\n";
    }
}

nlohmann::ordered_json bias_report_to_json(const BiasReport& r) {
    nlohmann::ordered_json j;
    j["seat"] = r.seat;
    j["lm"] = r.lm;
    j["ss"] = r.ss;
    j["icat"] = r.icat;
    j["crows"] = r.crows;
    j["mean_d"] = r.mean_d;
    j["pseudo_perplexity"] = r.pseudo_perplexity;
    return j;
}

BiasReport bias_report_from_json(const nlohmann::json& j) {
    BiasReport r;
    r.seat = j.at("seat").get<double>();
    r.lm = j.at("lm").get<double>();
    r.ss = j.at("ss").get<double>();
    r.icat = j.at("icat").get<double>();
    r.crows = j.at("crows").get<double>();
    r.mean_d = j.at("mean_d").get<double>();
    r.pseudo_perplexity = j.at("pseudo_perplexity").get<double>();
    return r;
}

void save_bias_report(const BiasReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write bias report: " + path);
    out << bias_report_to_json(r).dump(2) << "\n";
}

BiasReport load_bias_report(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bias report: invalid JSON in " + path + ": " + e.what());
    }
    return bias_report_from_json(j);
}

void write_bias_report_csv(const BiasReport& before, const BiasReport& after,
                           const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write report csv: " + path);
    out << "phase,seat,lm,ss,icat,crows,mean_d,pseudo_perplexity\n";
    out.precision(17);
    const auto row = [&](const char* phase, const BiasReport& r) {
        out << phase << "," << r.seat << "," << r.lm << "," << r.ss << "," << r.icat << ","
            << r.crows << "," << r.mean_d << "," << r.pseudo_perplexity << "\n";
    };
    row("before", before);
    row("after", after);
}

}  // namespace debias
