// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "debias/alignment.hpp"
#include "debias/errors.hpp"
#include "debias/rng.hpp"
#include "debias/text.hpp"

using namespace debias;

namespace {

constexpr double kLn2 = 0.69314718055994530942;

WordLists small_lists() {
    WordLists lists;
    lists.attribute_tuples = {{"he", "she"}};
    lists.targets = {"boss", "captain", "nurse"};
    return lists;
}

// Random pairwise corpus over a tiny vocabulary; texts vary by filler words
// so embeddings are distinct.
Corpus random_corpus(int n_groups, uint64_t seed) {
    const WordLists lists = small_lists();
    const std::vector<std::string> fillers = {"old",   "young", "tired", "happy",
                                              "brave", "calm",  "loud",  "quiet"};
    Rng rng(seed);
    Corpus corpus;
    corpus.word_lists = lists;
    for (int i = 0; i < n_groups; ++i) {
        const std::string& target = lists.targets[rng.uniform_int(3)];
        const std::string& f1 = fillers[rng.uniform_int(8)];
        const std::string& f2 = fillers[rng.uniform_int(8)];
        const std::string text = "the " + f1 + " he met a " + f2 + " " + target + " today .";
        PairwiseGroup g;
        char id[16];
        std::snprintf(id, sizeof(id), "g%03d", i);
        g.group_id = id;
        g.target = target;
        g.variants.push_back({0, "he", text});
        g.variants.push_back({1, "she", counterfactual_swap(text, "he", "she", {})});
        corpus.groups.push_back(std::move(g));
    }
    return corpus;
}

EncoderModel corpus_model(const Corpus& corpus, uint64_t seed = 1) {
    std::vector<std::string> sentences;
    for (const auto& g : corpus.groups) {
        for (const auto& v : g.variants) sentences.push_back(v.text);
    }
    for (const auto& t : corpus.word_lists.targets) sentences.push_back(target_template(t));
    EncoderConfig cfg;
    cfg.d_model = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.max_len = 16;
    cfg.seed = seed;
    return EncoderModel::init(cfg, WordTokenizer::build(sentences));
}

// --- independent oracle pieces (plain-loop reimplementations) ---

double oracle_cos(const Mat& a, const Mat& b) {
    double d = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (int j = 0; j < a.cols; ++j) {
        d += a.at(0, j) * b.at(0, j);
        na += a.at(0, j) * a.at(0, j);
        nb += b.at(0, j) * b.at(0, j);
    }
    return d / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> oracle_softmax(std::vector<double> x) {
    const double m = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (double& v : x) {
        v = std::exp(v - m);
        z += v;
    }
    for (double& v : x) v /= z;
    return x;
}

double oracle_jsd(const std::vector<double>& p, const std::vector<double>& q) {
    double v = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) v += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) v += 0.5 * q[i] * std::log(q[i] / m);
    }
    return v;
}

Mat oracle_word_rep(const EncoderModel& model, const std::string& text,
                    const std::string& word) {
    const Mat h = encode(model, text);
    const std::vector<std::string> tokens = tokenize(text);
    const std::string needle = tokenize(word)[0];
    Mat out(1, h.cols);
    int count = 0;
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] == needle) {
            for (int j = 0; j < h.cols; ++j) out.at(0, j) += h.at(static_cast<int>(t), j);
            ++count;
        }
    }
    for (double& v : out.a) v /= count;
    return out;
}

double oracle_bias_d(const EncoderModel& model, const PairwiseGroup& g, const WordLists& lists,
                     double temperature) {
    std::vector<Mat> protos;
    for (const auto& t : lists.targets) {
        protos.push_back(oracle_word_rep(model, target_template(t), t));
    }
    std::vector<std::vector<double>> dists;
    for (const auto& v : g.variants) {
        const Mat w = oracle_word_rep(model, v.text, v.attribute);
        std::vector<double> scores;
        for (const auto& p : protos) scores.push_back(oracle_cos(w, p) / temperature);
        dists.push_back(oracle_softmax(scores));
    }
    double total = 0.0;
    for (size_t i = 0; i < dists.size(); ++i) {
        for (size_t j = i + 1; j < dists.size(); ++j) total += oracle_jsd(dists[i], dists[j]);
    }
    return total;
}

// Term-by-term brute-force evaluation of the KNN-weighted causal effect.
double oracle_delta_total(const EncoderModel& model, const Corpus& corpus, int k,
                          double temperature, double temperature_s) {
    std::vector<std::pair<std::string, Mat>> embs;
    for (const auto& g : corpus.groups) {
        Mat acc(1, model.config.d_model);
        for (const auto& v : g.variants) {
            const Mat h = encode(model, v.text);
            for (int j = 0; j < h.cols; ++j) {
                double col = 0.0;
                for (int i = 0; i < h.rows; ++i) col += h.at(i, j);
                acc.at(0, j) += col / h.rows;
            }
        }
        for (double& x : acc.a) x /= static_cast<double>(g.variants.size());
        embs.emplace_back(g.group_id, std::move(acc));
    }
    std::sort(embs.begin(), embs.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    double delta_total = 0.0;
    for (size_t a = 0; a < embs.size(); ++a) {
        std::vector<std::pair<double, std::string>> sims;
        for (size_t b = 0; b < embs.size(); ++b) {
            if (b == a) continue;
            sims.emplace_back(oracle_cos(embs[a].second, embs[b].second), embs[b].first);
        }
        std::sort(sims.begin(), sims.end(), [](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return x.second < y.second;
        });
        std::vector<std::string> hood_ids = {embs[a].first};
        std::vector<double> scores = {1.0 / temperature_s};
        for (int i = 0; i < k; ++i) {
            hood_ids.push_back(sims[i].second);
            scores.push_back(sims[i].first / temperature_s);
        }
        const std::vector<double> weights = oracle_softmax(scores);
        double delta = 0.0;
        for (size_t i = 0; i < hood_ids.size(); ++i) {
            delta += weights[i] *
                     oracle_bias_d(model, *corpus.find(hood_ids[i]), corpus.word_lists,
                                   temperature);
        }
        delta_total += delta;
    }
    return delta_total;
}

}  // namespace

TEST_CASE("jsd identities and tagged values") {
    CHECK(jsd({0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}) == 0.0);
    CHECK(jsd({1.0, 0.0}, {0.0, 1.0}) == doctest::Approx(kLn2).epsilon(1e-12));

    // Independent direct-formula evaluation of the derived example.
    const std::vector<double> p = {0.5, 0.5};
    const std::vector<double> q = {0.25, 0.75};
    const double expected = oracle_jsd(p, q);
    CHECK(jsd(p, q) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(jsd(p, q) == doctest::Approx(0.03382).epsilon(1e-3));
}

TEST_CASE("jsd properties on random distributions") {
    Rng rng(23);
    for (int iter = 0; iter < 300; ++iter) {
        const int n = 2 + rng.uniform_int(6);
        std::vector<double> p(n);
        std::vector<double> q(n);
        double zp = 0.0;
        double zq = 0.0;
        for (int i = 0; i < n; ++i) {
            p[i] = rng.uniform();
            q[i] = rng.uniform();
            zp += p[i];
            zq += q[i];
        }
        for (int i = 0; i < n; ++i) {
            p[i] /= zp;
            q[i] /= zq;
        }
        const double v = jsd(p, q);
        CHECK(v >= 0.0);
        CHECK(v <= kLn2 + 1e-12);
        CHECK(v == doctest::Approx(jsd(q, p)).epsilon(1e-12));
    }
}

TEST_CASE("jsd validates its inputs") {
    CHECK_THROWS_AS(jsd({0.5, 0.5}, {0.3, 0.3, 0.4}), NumericError);
    CHECK_THROWS_AS(jsd({0.5, 0.6}, {0.5, 0.5}), NumericError);
    CHECK_THROWS_AS(jsd({-0.1, 1.1}, {0.5, 0.5}), NumericError);
}

TEST_CASE("distribution_from_cosines reproduces the softmax example") {
    const std::vector<double> dist = distribution_from_cosines({1.0, 0.0}, 1.0);
    CHECK(dist[0] == doctest::Approx(0.7311).epsilon(1e-3));
    CHECK(dist[1] == doctest::Approx(0.2689).epsilon(1e-3));
    const double e = std::exp(1.0);
    CHECK(dist[0] == doctest::Approx(e / (e + 1.0)).epsilon(1e-12));
    CHECK(dist[1] == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-12));
}

TEST_CASE("target_distribution normalizes and flattens at high temperature") {
    const Corpus corpus = random_corpus(4, 3);
    const EncoderModel model = corpus_model(corpus);
    const auto& v = corpus.groups[0].variants[0];

    const auto dist = target_distribution(model, v.text, v.attribute, corpus.word_lists, 1.0);
    REQUIRE(dist.size() == corpus.word_lists.targets.size());
    double total = 0.0;
    for (const double x : dist) total += x;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    const auto flat = target_distribution(model, v.text, v.attribute, corpus.word_lists, 1e6);
    const double uniform = 1.0 / static_cast<double>(flat.size());
    for (const double x : flat) CHECK(std::fabs(x - uniform) < 1e-3);

    CHECK_THROWS_AS(target_distribution(model, v.text, v.attribute, corpus.word_lists, 0.0),
                    ConfigError);
}

TEST_CASE("bias measure is zero for identical variant inputs") {
    const Corpus corpus = random_corpus(3, 5);
    const EncoderModel model = corpus_model(corpus);
    const WordLists lists = corpus.word_lists;

    PairwiseGroup degenerate;
    degenerate.group_id = "dg";
    degenerate.target = "boss";
    degenerate.variants = {{0, "he", "he is a boss ."}, {1, "he", "he is a boss ."}};
    CHECK(bias_measure(model, degenerate, lists, 1.0) == 0.0);

    PairwiseGroup three = degenerate;
    three.variants.push_back({2, "he", "he is a boss ."});
    CHECK(bias_measure(model, three, lists, 1.0) == 0.0);

    // A genuine pairwise group generally has positive D.
    CHECK(bias_measure(model, corpus.groups[0], lists, 1.0) > 0.0);
}

TEST_CASE("bias measure is symmetric under variant permutation") {
    const Corpus corpus = random_corpus(3, 9);
    const EncoderModel model = corpus_model(corpus);
    PairwiseGroup g = corpus.groups[0];
    const double d1 = bias_measure(model, g, corpus.word_lists, 1.0);
    std::swap(g.variants[0], g.variants[1]);
    const double d2 = bias_measure(model, g, corpus.word_lists, 1.0);
    CHECK(d1 == doctest::Approx(d2).epsilon(1e-15));
}

TEST_CASE("build_knn weight properties") {
    std::map<std::string, Mat> embs;
    const auto vec = [](double x, double y) {
        Mat m(1, 2);
        m.at(0, 0) = x;
        m.at(0, 1) = y;
        return m;
    };
    embs.emplace("a", vec(1.0, 0.0));
    embs.emplace("b", vec(0.7071, 0.7071));
    embs.emplace("c", vec(0.0, 1.0));

    SUBCASE("hand-computed example") {
        const NeighborhoodMap hoods = build_knn(embs, 2, 1.0);
        const KnnNeighborhood& hood = hoods.at("a");
        REQUIRE(hood.neighbor_ids.size() == 3);
        CHECK(hood.neighbor_ids[0] == "a");
        CHECK(hood.neighbor_ids[1] == "b");
        CHECK(hood.neighbor_ids[2] == "c");
        CHECK(hood.weights[0] == doctest::Approx(0.4730).epsilon(1e-3));
        CHECK(hood.weights[1] == doctest::Approx(0.3529).epsilon(1e-3));
        CHECK(hood.weights[2] == doctest::Approx(0.1740).epsilon(1e-3));
    }

    SUBCASE("weights sum to 1 and anchor weight is maximal") {
        const NeighborhoodMap hoods = build_knn(embs, 2, 0.7);
        for (const auto& [id, hood] : hoods) {
            double total = 0.0;
            for (const double w : hood.weights) total += w;
            CHECK(std::fabs(total - 1.0) < 1e-9);
            for (const double w : hood.weights) CHECK(hood.weights[0] >= w);
        }
    }

    SUBCASE("K = 0 gives the anchor alone with weight 1") {
        const NeighborhoodMap hoods = build_knn(embs, 0, 1.0);
        for (const auto& [id, hood] : hoods) {
            CHECK(hood.neighbor_ids == std::vector<std::string>{id});
            REQUIRE(hood.weights.size() == 1);
            CHECK(hood.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
        }
    }

    SUBCASE("identical embeddings give uniform weights, ids break ties") {
        std::map<std::string, Mat> same;
        for (const char* id : {"p", "q", "r", "s"}) same.emplace(id, vec(0.5, 0.5));
        const NeighborhoodMap hoods = build_knn(same, 2, 1.0);
        const KnnNeighborhood& hood = hoods.at("q");
        CHECK(hood.neighbor_ids == std::vector<std::string>{"q", "p", "r"});
        for (const double w : hood.weights) {
            CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        }
    }

    SUBCASE("fewer than K+1 groups is an error") {
        CHECK_THROWS_AS(build_knn(embs, 3, 1.0), DataError);
    }

    SUBCASE("zero embedding is an error") {
        std::map<std::string, Mat> bad = embs;
        bad.emplace("z", Mat(1, 2));
        CHECK_THROWS_AS(build_knn(bad, 1, 1.0), NumericError);
    }
}

TEST_CASE("random_neighborhoods are uniform, seeded and anchor-first") {
    const std::vector<std::string> ids = {"a", "b", "c", "d", "e"};
    const NeighborhoodMap h1 = random_neighborhoods(ids, 2, 77);
    const NeighborhoodMap h2 = random_neighborhoods(ids, 2, 77);
    const NeighborhoodMap h3 = random_neighborhoods(ids, 2, 78);
    bool any_different = false;
    for (const auto& [id, hood] : h1) {
        CHECK(hood.neighbor_ids[0] == id);
        CHECK(hood.neighbor_ids.size() == 3);
        for (const double w : hood.weights) CHECK(w == doctest::Approx(1.0 / 3.0));
        CHECK(h2.at(id).neighbor_ids == hood.neighbor_ids);
        if (h3.at(id).neighbor_ids != hood.neighbor_ids) any_different = true;
    }
    CHECK(any_different);
}

TEST_CASE("causal effect: K=0 reduces to D, identical weights sum correctly") {
    const Corpus corpus = random_corpus(6, 13);
    const EncoderModel model = corpus_model(corpus);
    const auto embs = group_embeddings(model, corpus);

    const NeighborhoodMap hoods = build_knn(embs, 0, 1.0);
    const AlignmentReport report = causal_effect(model, corpus, hoods, corpus.word_lists, 1.0);
    double delta_sum = 0.0;
    for (const auto& row : report.rows) {
        const double d = bias_measure(model, *corpus.find(row.group_id), corpus.word_lists, 1.0);
        CHECK(row.delta == doctest::Approx(d).epsilon(1e-12));
        delta_sum += row.delta;
    }
    CHECK(report.delta_total == doctest::Approx(delta_sum).epsilon(1e-12));
}

TEST_CASE("causal effect applies handcrafted weights as a weighted sum") {
    const Corpus corpus = random_corpus(2, 21);
    const EncoderModel model = corpus_model(corpus);
    const WordLists lists = corpus.word_lists;
    const std::string a = corpus.groups[0].group_id;
    const std::string b = corpus.groups[1].group_id;

    NeighborhoodMap hoods;
    hoods[a] = {a, {a, b}, {0.6, 0.4}};
    hoods[b] = {b, {b, a}, {0.6, 0.4}};
    const AlignmentReport report = causal_effect(model, corpus, hoods, lists, 1.0);
    const double da = bias_measure(model, *corpus.find(a), lists, 1.0);
    const double db = bias_measure(model, *corpus.find(b), lists, 1.0);
    CHECK(report.row(a).delta == doctest::Approx(0.6 * da + 0.4 * db).epsilon(1e-12));
    CHECK(report.row(b).delta == doctest::Approx(0.6 * db + 0.4 * da).epsilon(1e-12));
}

TEST_CASE("module delta matches the brute-force oracle term by term") {
    for (const uint64_t seed : {101ULL, 202ULL}) {
        for (const int n : {7, 12, 20}) {
            const Corpus corpus = random_corpus(n, seed);
            const EncoderModel model = corpus_model(corpus, seed + 1);
            for (const int k : {0, 2, 5}) {
                if (n < k + 1) continue;
                const auto embs = group_embeddings(model, corpus);
                const NeighborhoodMap hoods = build_knn(embs, k, 1.0);
                const AlignmentReport report =
                    causal_effect(model, corpus, hoods, corpus.word_lists, 1.0);
                const double oracle = oracle_delta_total(model, corpus, k, 1.0, 1.0);
                CAPTURE(seed);
                CAPTURE(n);
                CAPTURE(k);
                CHECK(std::fabs(report.delta_total - oracle) < 1e-9);
            }
        }
    }
}

TEST_CASE("select_aligned keeps the largest deltas") {
    AlignmentReport report;
    report.rows = {{"a", 0.9, {}, {}, false},
                   {"b", 0.1, {}, {}, false},
                   {"c", 0.5, {}, {}, false}};
    select_aligned(report, 2.0 / 3.0);
    CHECK(report.kept_ids() == std::vector<std::string>{"a", "c"});
    CHECK(report.filtered_ids() == std::vector<std::string>{"b"});

    select_aligned(report, 1.0);
    CHECK(report.filtered_ids().empty());

    CHECK_THROWS_AS(select_aligned(report, 0.0), ConfigError);
    CHECK_THROWS_AS(select_aligned(report, 1.0001), ConfigError);
}

TEST_CASE("zero-D group never outranks positive-delta groups") {
    AlignmentReport report;
    report.rows = {{"a", 0.0, {}, {}, false},
                   {"b", 0.3, {}, {}, false},
                   {"c", 0.0001, {}, {}, false}};
    select_aligned(report, 2.0 / 3.0);
    const auto kept = report.kept_ids();
    CHECK(std::find(kept.begin(), kept.end(), "a") == kept.end());
}

TEST_CASE("alignment report round-trips through JSON") {
    AlignmentReport report;
    report.delta_total = 1.25;
    report.keep_fraction = 0.5;
    report.k = 5;
    report.rows = {{"a", 0.75, {"a", "b"}, {0.6, 0.4}, true},
                   {"b", 0.5, {"b", "a"}, {0.7, 0.3}, false}};
    const AlignmentReport back = alignment_report_from_json(alignment_report_to_json(report));
    CHECK(back.delta_total == report.delta_total);
    CHECK(back.rows.size() == 2);
    CHECK(back.rows[0].neighbors == report.rows[0].neighbors);
    CHECK(back.rows[0].weights == report.rows[0].weights);
    CHECK(back.rows[0].kept);
    CHECK_FALSE(back.rows[1].kept);
    const NeighborhoodMap hoods = neighborhoods_from_report(back);
    CHECK(hoods.at("a").weights == std::vector<double>{0.6, 0.4});
}
