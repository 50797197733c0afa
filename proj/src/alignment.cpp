// SPDX-License-Identifier: Apache-2.0
#include "debias/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "debias/errors.hpp"
#include "debias/rng.hpp"

namespace debias {

namespace {

void softmax_inplace(std::vector<double>& x) {
    const double m = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (double& v : x) {
        v = std::exp(v - m);
        z += v;
    }
    for (double& v : x) v /= z;
}

double cosine_value(const Mat& a, const Mat& b) {
    const double na = norm2(a.row_ptr(0), a.cols);
    const double nb = norm2(b.row_ptr(0), b.cols);
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine of zero-norm vector");
    return dot(a.row_ptr(0), b.row_ptr(0), a.cols) / (na * nb);
}

}  // namespace

double jsd(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw NumericError("jsd: length mismatch");
    double sp = 0.0;
    double sq = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw NumericError("jsd: negative probability");
        sp += p[i];
        sq += q[i];
    }
    if (std::fabs(sp - 1.0) > 1e-9 || std::fabs(sq - 1.0) > 1e-9) {
        throw NumericError("jsd: inputs must sum to 1");
    }
    double v = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) v += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) v += 0.5 * q[i] * std::log(q[i] / m);
    }
    return v;
}

std::string target_template(const std::string& word) { return "it is about " + word + " ."; }

std::vector<Mat> target_prototypes(const EncoderModel& model, const WordLists& lists) {
    std::vector<Mat> prototypes;
    prototypes.reserve(lists.targets.size());
    for (const auto& t : lists.targets) {
        prototypes.push_back(word_in_context_repr(model, target_template(t), t));
    }
    return prototypes;
}

std::vector<double> distribution_from_cosines(std::vector<double> cosines, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("distribution: temperature must be > 0");
    if (cosines.empty()) throw DataError("distribution: no scores");
    for (double& c : cosines) c /= temperature;
    softmax_inplace(cosines);
    return cosines;
}

std::vector<double> target_distribution(const EncoderModel& model, const std::string& text,
                                        const std::string& attribute_word, const WordLists& lists,
                                        double temperature) {
    const Mat w = word_in_context_repr(model, text, attribute_word);
    const std::vector<Mat> prototypes = target_prototypes(model, lists);
    std::vector<double> scores(prototypes.size());
    for (size_t m = 0; m < prototypes.size(); ++m) {
        scores[m] = cosine_value(w, prototypes[m]);
    }
    return distribution_from_cosines(std::move(scores), temperature);
}

double bias_measure(const EncoderModel& model, const PairwiseGroup& group, const WordLists& lists,
                    double temperature) {
    std::vector<std::vector<double>> dists;
    dists.reserve(group.variants.size());
    for (const auto& v : group.variants) {
        dists.push_back(target_distribution(model, v.text, v.attribute, lists, temperature));
    }
    double total = 0.0;
    for (size_t i = 0; i < dists.size(); ++i) {
        for (size_t j = i + 1; j < dists.size(); ++j) total += jsd(dists[i], dists[j]);
    }
    return total;
}

std::map<std::string, Mat> group_embeddings(const EncoderModel& frozen, const Corpus& corpus) {
    std::map<std::string, Mat> out;
    for (const auto& g : corpus.groups) {
        Mat acc(1, frozen.config.d_model);
        for (const auto& v : g.variants) {
            const Mat rep = sentence_repr(encode(frozen, v.text));
            axpy(acc, 1.0, rep);
        }
        for (double& x : acc.a) x /= static_cast<double>(g.variants.size());
        out.emplace(g.group_id, std::move(acc));
    }
    return out;
}

NeighborhoodMap build_knn(const std::map<std::string, Mat>& embeddings, int k,
                          double temperature_s) {
    if (k < 0) throw ConfigError("build_knn: K must be >= 0");
    if (!(temperature_s > 0.0)) throw ConfigError("build_knn: temperature must be > 0");
    const size_t n = embeddings.size();
    if (n < static_cast<size_t>(k) + 1) {
        throw DataError("build_knn: need at least K+1 = " + std::to_string(k + 1) +
                        " groups, have " + std::to_string(n));
    }
    std::vector<const std::string*> ids;
    std::vector<const Mat*> vecs;
    ids.reserve(n);
    vecs.reserve(n);
    for (const auto& [id, v] : embeddings) {
        if (!all_finite(v)) throw NumericError("build_knn: non-finite embedding for '" + id + "'");
        if (norm2(v.row_ptr(0), v.cols) == 0.0) {
            throw NumericError("build_knn: zero embedding for '" + id + "'");
        }
        ids.push_back(&id);
        vecs.push_back(&v);
    }

    NeighborhoodMap hoods;
    for (size_t a = 0; a < n; ++a) {
        std::vector<std::pair<double, size_t>> sims;
        sims.reserve(n - 1);
        for (size_t b = 0; b < n; ++b) {
            if (b == a) continue;
            sims.emplace_back(cosine_value(*vecs[a], *vecs[b]), b);
        }
        std::sort(sims.begin(), sims.end(), [&](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return *ids[x.second] < *ids[y.second];
        });

        KnnNeighborhood hood;
        hood.anchor_id = *ids[a];
        hood.neighbor_ids.push_back(*ids[a]);
        std::vector<double> scores = {1.0 / temperature_s};
        for (int i = 0; i < k; ++i) {
            hood.neighbor_ids.push_back(*ids[sims[i].second]);
            scores.push_back(sims[i].first / temperature_s);
        }
        softmax_inplace(scores);
        hood.weights = std::move(scores);
        hoods.emplace(hood.anchor_id, std::move(hood));
    }
    return hoods;
}

NeighborhoodMap random_neighborhoods(const std::vector<std::string>& group_ids, int k,
                                     uint64_t seed) {
    const size_t n = group_ids.size();
    if (n < static_cast<size_t>(k) + 1) {
        throw DataError("random_neighborhoods: need at least K+1 groups");
    }
    std::vector<std::string> sorted_ids = group_ids;
    std::sort(sorted_ids.begin(), sorted_ids.end());
    Rng rng(seed);
    NeighborhoodMap hoods;
    for (const auto& id : sorted_ids) {
        std::vector<std::string> others;
        others.reserve(n - 1);
        for (const auto& o : sorted_ids) {
            if (o != id) others.push_back(o);
        }
        rng.shuffle(others);
        KnnNeighborhood hood;
        hood.anchor_id = id;
        hood.neighbor_ids.push_back(id);
        for (int i = 0; i < k; ++i) hood.neighbor_ids.push_back(others[i]);
        hood.weights.assign(static_cast<size_t>(k) + 1, 1.0 / (k + 1));
        hoods.emplace(id, std::move(hood));
    }
    return hoods;
}

std::vector<std::string> AlignmentReport::kept_ids() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
        if (r.kept) out.push_back(r.group_id);
    }
    return out;
}

std::vector<std::string> AlignmentReport::filtered_ids() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
        if (!r.kept) out.push_back(r.group_id);
    }
    return out;
}

const AlignmentRow& AlignmentReport::row(const std::string& group_id) const {
    for (const auto& r : rows) {
        if (r.group_id == group_id) return r;
    }
    throw DataError("alignment report: unknown group '" + group_id + "'");
}

AlignmentReport causal_effect(const EncoderModel& frozen, const Corpus& corpus,
                              const NeighborhoodMap& hoods, const WordLists& lists,
                              double temperature) {
    std::unordered_map<std::string, const PairwiseGroup*> by_id;
    for (const auto& g : corpus.groups) by_id.emplace(g.group_id, &g);

    // D is evaluated once per group, then reused across neighborhoods.
    std::unordered_map<std::string, double> d_cache;
    auto d_of = [&](const std::string& id) {
        const auto it = d_cache.find(id);
        if (it != d_cache.end()) return it->second;
        const auto git = by_id.find(id);
        if (git == by_id.end()) {
            throw DataError("causal_effect: neighborhood references unknown group '" + id + "'");
        }
        const double d = bias_measure(frozen, *git->second, lists, temperature);
        d_cache.emplace(id, d);
        return d;
    };

    AlignmentReport report;
    std::vector<std::string> ids;
    ids.reserve(corpus.groups.size());
    for (const auto& g : corpus.groups) ids.push_back(g.group_id);
    std::sort(ids.begin(), ids.end());

    for (const auto& id : ids) {
        const auto hit = hoods.find(id);
        if (hit == hoods.end()) {
            throw DataError("causal_effect: no neighborhood for group '" + id + "'");
        }
        const KnnNeighborhood& hood = hit->second;
        AlignmentRow row;
        row.group_id = id;
        row.neighbors = hood.neighbor_ids;
        row.weights = hood.weights;
        for (size_t k = 0; k < hood.neighbor_ids.size(); ++k) {
            row.delta += d_of(hood.neighbor_ids[k]) * hood.weights[k];
        }
        report.delta_total += row.delta;
        report.rows.push_back(std::move(row));
    }
    return report;
}

void select_aligned(AlignmentReport& report, double keep_fraction) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
        throw ConfigError("select_aligned: keep_fraction must be in (0,1], got " +
                          std::to_string(keep_fraction));
    }
    std::vector<size_t> order(report.rows.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
        if (report.rows[x].delta != report.rows[y].delta) {
            return report.rows[x].delta > report.rows[y].delta;
        }
        return report.rows[x].group_id < report.rows[y].group_id;
    });
    const size_t n_keep = keep_count(keep_fraction, report.rows.size());
    for (size_t i = 0; i < order.size(); ++i) report.rows[order[i]].kept = i < n_keep;
    report.keep_fraction = keep_fraction;
}

nlohmann::ordered_json alignment_report_to_json(const AlignmentReport& report) {
    nlohmann::ordered_json j;
    j["delta_total"] = report.delta_total;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : report.rows) {
        nlohmann::ordered_json rj;
        rj["group_id"] = r.group_id;
        rj["delta"] = r.delta;
        rj["neighbors"] = r.neighbors;
        rj["weights"] = r.weights;
        rj["kept"] = r.kept;
        rows.push_back(std::move(rj));
    }
    j["groups"] = std::move(rows);
    j["keep_fraction"] = report.keep_fraction;
    j["K"] = report.k;
    return j;
}

AlignmentReport alignment_report_from_json(const nlohmann::json& j) {
    AlignmentReport report;
    report.delta_total = j.at("delta_total").get<double>();
    report.keep_fraction = j.at("keep_fraction").get<double>();
    report.k = j.at("K").get<int>();
    for (const auto& rj : j.at("groups")) {
        AlignmentRow r;
        r.group_id = rj.at("group_id").get<std::string>();
        r.delta = rj.at("delta").get<double>();
        r.neighbors = rj.at("neighbors").get<std::vector<std::string>>();
        r.weights = rj.at("weights").get<std::vector<double>>();
        r.kept = rj.at("kept").get<bool>();
        report.rows.push_back(std::move(r));
    }
    return report;
}

void save_alignment_report(const AlignmentReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write alignment report: " + path);
    out << alignment_report_to_json(report).dump(2) << "\n";
}

AlignmentReport load_alignment_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open alignment report: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("alignment report: invalid JSON in " + path + ": " + e.what());
    }
    return alignment_report_from_json(j);
}

NeighborhoodMap neighborhoods_from_report(const AlignmentReport& report) {
    NeighborhoodMap hoods;
    for (const auto& r : report.rows) {
        KnnNeighborhood hood;
        hood.anchor_id = r.group_id;
        hood.neighbor_ids = r.neighbors;
        hood.weights = r.weights;
        hoods.emplace(r.group_id, std::move(hood));
    }
    return hoods;
}

}  // namespace debias
