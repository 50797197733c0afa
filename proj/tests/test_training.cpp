// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "debias/errors.hpp"
#include "debias/metrics.hpp"
#include "debias/training.hpp"
#include "test_util.hpp"

using namespace debias;
using namespace debias::testutil;

namespace {

struct Fixture {
    Corpus corpus;
    EncoderModel model;
    EncoderModel frozen;
    NeighborhoodMap hoods;
    std::vector<std::string> ids;
    std::vector<std::string> heldout;
};

Fixture make_fixture(int n_groups = 8, int k = 2, uint64_t seed = 31) {
    Fixture f;
    f.corpus = random_corpus(n_groups, seed);
    f.heldout = {"the old he met a calm boss today .", "it is about nurse ."};
    f.model = corpus_model(f.corpus, seed + 1);
    PretrainConfig pre;
    pre.epochs = 5;
    pre.learning_rate = 0.1;
    pre.seed = seed + 2;
    pretrain_mlm(f.model, corpus_sentences(f.corpus), pre);
    f.frozen = snapshot(f.model);
    f.hoods = build_knn(group_embeddings(f.frozen, f.corpus), k, 1.0);
    f.ids = group_ids(f.corpus);
    return f;
}

std::vector<Mat> grads_of(const EncoderModel& model, Fixture& f, double lambda) {
    FrozenStateCache cache(f.frozen);
    BatchLoss bl = build_batch_loss(model, cache, f.corpus, f.ids, f.hoods,
                                    f.corpus.word_lists, 1.0, lambda);
    bl.tape.backward(bl.loss);
    return collect_param_grads(bl.tape, bl.bound);
}

}  // namespace

TEST_CASE("total_loss arithmetic") {
    CHECK(total_loss(0.4, 0.9, 0.0) == 0.4);
    CHECK(total_loss(0.5, 0.25, 1.0) == 0.75);
    CHECK(total_loss(0.7, 0.0, 2.0) == 0.7);
}

TEST_CASE("loss_repr is zero for the same model and symmetric") {
    Fixture f = make_fixture(4);
    const std::vector<std::string> sentences = corpus_sentences(f.corpus);
    CHECK(loss_repr_value(f.model, f.model, sentences) == 0.0);

    EncoderModel shifted = f.model;
    for (double& v : shifted.layers[0].wq.a) v += 0.01;
    CHECK(loss_repr_value(f.model, shifted, sentences) ==
          doctest::Approx(loss_repr_value(shifted, f.model, sentences)).epsilon(1e-15));
}

TEST_CASE("loss_repr closed form when every entry differs by 0.1") {
    Fixture f = make_fixture(3);
    // Shifting the final layer-norm offset moves every hidden entry by 0.1.
    EncoderModel shifted = f.model;
    for (double& v : shifted.lnf_b.a) v += 0.1;
    const double mse = loss_repr_value(shifted, f.model, corpus_sentences(f.corpus));
    CHECK(mse == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("loss_bias weighted-sum cases") {
    Fixture f = make_fixture(6, 2);
    const WordLists& lists = f.corpus.word_lists;

    SUBCASE("degenerate K=0 equals the sum of anchor D values") {
        const NeighborhoodMap k0 = build_knn(group_embeddings(f.frozen, f.corpus), 0, 1.0);
        double expected = 0.0;
        for (const auto& id : f.ids) {
            expected += bias_measure(f.model, *f.corpus.find(id), lists, 1.0);
        }
        CHECK(loss_bias_value(f.model, f.corpus, f.ids, k0, lists, 1.0) ==
              doctest::Approx(expected).epsilon(1e-12));
    }

    SUBCASE("handcrafted weights are applied") {
        const std::string a = f.ids[0];
        const std::string b = f.ids[1];
        NeighborhoodMap hand;
        hand[a] = {a, {a, b}, {0.6, 0.4}};
        const double da = bias_measure(f.model, *f.corpus.find(a), lists, 1.0);
        const double db = bias_measure(f.model, *f.corpus.find(b), lists, 1.0);
        CHECK(loss_bias_value(f.model, f.corpus, {a}, hand, lists, 1.0) ==
              doctest::Approx(0.6 * da + 0.4 * db).epsilon(1e-12));
    }

    SUBCASE("identical paired variants give zero loss") {
        Corpus degenerate;
        degenerate.word_lists = lists;
        for (int i = 0; i < 3; ++i) {
            PairwiseGroup g;
            g.group_id = "d" + std::to_string(i);
            g.target = "boss";
            g.variants = {{0, "he", "he is a boss ."}, {1, "he", "he is a boss ."}};
            degenerate.groups.push_back(g);
        }
        NeighborhoodMap hand;
        hand["d0"] = {"d0", {"d0", "d1", "d2"}, {0.5, 0.3, 0.2}};
        CHECK(loss_bias_value(f.model, degenerate, {"d0"}, hand, lists, 1.0) == 0.0);
    }
}

TEST_CASE("batch loss values agree with the standalone loss functions") {
    Fixture f = make_fixture(6, 2);
    FrozenStateCache cache(f.frozen);
    const std::vector<std::string> batch = {f.ids[0], f.ids[3]};
    BatchLoss bl = build_batch_loss(f.model, cache, f.corpus, batch, f.hoods,
                                    f.corpus.word_lists, 1.0, 0.5);

    CHECK(bl.bias_value ==
          doctest::Approx(loss_bias_value(f.model, f.corpus, batch, f.hoods,
                                          f.corpus.word_lists, 1.0))
              .epsilon(1e-12));

    // Representation loss covers each distinct batch sentence once.
    std::vector<std::string> sentences;
    std::set<std::string> seen;
    for (const auto& anchor : batch) {
        for (const auto& id : f.hoods.at(anchor).neighbor_ids) {
            if (!seen.insert(id).second) continue;
            for (const auto& v : f.corpus.find(id)->variants) sentences.push_back(v.text);
        }
    }
    CHECK(bl.repr_value ==
          doctest::Approx(loss_repr_value(f.model, f.frozen, sentences)).epsilon(1e-12));
    CHECK(bl.total_value ==
          doctest::Approx(total_loss(bl.bias_value, bl.repr_value, 0.5)).epsilon(1e-12));
}

TEST_CASE("combined gradient is linear in lambda") {
    Fixture f = make_fixture(5, 1);
    // Perturb the model so the repr gradient is nonzero.
    EncoderModel moved = f.model;
    for (double& v : moved.layers[0].wv.a) v += 0.01;

    const auto g0 = grads_of(moved, f, 0.0);
    const auto g1 = grads_of(moved, f, 1.0);
    const auto g2 = grads_of(moved, f, 2.0);

    double max_err = 0.0;
    double max_repr = 0.0;
    for (size_t p = 0; p < g0.size(); ++p) {
        for (size_t i = 0; i < g0[p].size(); ++i) {
            const double repr_part = g1[p].a[i] - g0[p].a[i];
            const double predicted = g0[p].a[i] + 2.0 * repr_part;
            max_err = std::max(max_err, std::fabs(predicted - g2[p].a[i]));
            max_repr = std::max(max_repr, std::fabs(repr_part));
        }
    }
    CHECK(max_repr > 0.0);  // L_r actually contributes
    CHECK(max_err < 1e-9);
}

TEST_CASE("train honors epochs=0 as a no-op with an empty log") {
    Fixture f = make_fixture(6, 1);
    EncoderModel before = f.model;
    TrainConfig cfg;
    cfg.epochs = 0;
    const TrainLog log = train(f.model, f.frozen, f.corpus, f.ids, f.hoods, cfg, f.heldout);
    CHECK(log.rows.empty());
    CHECK(params_equal(before, f.model));
}

TEST_CASE("train is deterministic and never mutates the frozen model") {
    Fixture f1 = make_fixture(8, 2, 55);
    Fixture f2 = make_fixture(8, 2, 55);
    const EncoderModel frozen_before = f1.frozen;

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.learning_rate = 5e-3;
    cfg.batch_size = 3;
    cfg.seed = 99;
    const TrainLog l1 = train(f1.model, f1.frozen, f1.corpus, f1.ids, f1.hoods, cfg, f1.heldout);
    const TrainLog l2 = train(f2.model, f2.frozen, f2.corpus, f2.ids, f2.hoods, cfg, f2.heldout);

    CHECK(params_equal(f1.model, f2.model));
    CHECK(params_equal(f1.frozen, frozen_before));
    REQUIRE(l1.rows.size() == l2.rows.size());
    REQUIRE(l1.rows.size() == 3);  // epoch 0 + 2 epochs
    for (size_t i = 0; i < l1.rows.size(); ++i) {
        CHECK(l1.rows[i].loss_total == l2.rows[i].loss_total);
        CHECK(l1.rows[i].mean_d == l2.rows[i].mean_d);
        CHECK(std::isfinite(l1.rows[i].loss_total));
    }
}

TEST_CASE("training reduces the bias loss on the aligned set") {
    Fixture f = make_fixture(10, 2, 77);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 4;
    cfg.seed = 7;
    const TrainLog log = train(f.model, f.frozen, f.corpus, f.ids, f.hoods, cfg, f.heldout);
    REQUIRE(log.rows.size() == 5);
    CHECK(log.rows.back().mean_d < log.rows.front().mean_d);
}

TEST_CASE("large lambda anchors held-out perplexity within 1 percent") {
    Fixture f = make_fixture(8, 1, 91);
    const double ppl_before = pseudo_perplexity(f.model, f.heldout);
    TrainConfig cfg;
    cfg.epochs = 4;
    // SGD on the quadratic anchor needs lambda * lr below the stability
    // threshold; 100x the lambda means a correspondingly smaller step.
    cfg.learning_rate = 5e-4;
    cfg.batch_size = 4;
    cfg.lambda = 100.0;
    cfg.seed = 5;
    train(f.model, f.frozen, f.corpus, f.ids, f.hoods, cfg, f.heldout);
    const double ppl_after = pseudo_perplexity(f.model, f.heldout);
    CHECK(std::fabs(ppl_after - ppl_before) / ppl_before < 0.01);
}

TEST_CASE("lambda=1 ends with smaller final repr loss than lambda=0") {
    TrainConfig base;
    base.epochs = 3;
    base.learning_rate = 1e-2;
    base.batch_size = 4;
    base.seed = 11;

    Fixture fa = make_fixture(8, 2, 42);
    TrainConfig with = base;
    with.lambda = 1.0;
    train(fa.model, fa.frozen, fa.corpus, fa.ids, fa.hoods, with, fa.heldout);
    const double repr_with = loss_repr_value(fa.model, fa.frozen, corpus_sentences(fa.corpus));

    Fixture fb = make_fixture(8, 2, 42);
    TrainConfig without = base;
    without.lambda = 0.0;
    train(fb.model, fb.frozen, fb.corpus, fb.ids, fb.hoods, without, fb.heldout);
    const double repr_without = loss_repr_value(fb.model, fb.frozen, corpus_sentences(fb.corpus));

    CHECK(repr_with <= repr_without);
}

TEST_CASE("train validates its config") {
    TrainConfig bad;
    bad.epochs = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.epochs = 1;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.learning_rate = 1e-3;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("train log serialization") {
    TrainLog log;
    log.rows = {{0, 0.5, 0.1, 0.6, 0.2, 11.0}, {1, 0.4, 0.1, 0.5, 0.15, 11.2}};
    const std::string csv =
        (std::filesystem::temp_directory_path() / "debias_train_log.csv").string();
    const std::string js =
        (std::filesystem::temp_directory_path() / "debias_train_log.json").string();
    write_train_log_csv(log, csv);
    write_train_log_json(log, js);
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,loss_bias,loss_repr,loss_total,mean_d,heldout_ppl");
    std::ifstream jin(js);
    nlohmann::json j;
    jin >> j;
    CHECK(j.at("rows").size() == 2);
    CHECK(j.at("rows")[1].at("epoch") == 1);
    std::remove(csv.c_str());
    std::remove(js.c_str());
}
