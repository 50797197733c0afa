// SPDX-License-Identifier: Apache-2.0
#include "debias/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "debias/errors.hpp"
#include "debias/metrics.hpp"
#include "debias/rng.hpp"

namespace debias {

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lambda < 0.0) throw ConfigError("train: lambda must be >= 0");
}

double total_loss(double loss_bias, double loss_repr, double lambda) {
    return loss_bias + lambda * loss_repr;
}

const Mat& FrozenStateCache::states(const std::string& text) {
    const auto it = cache_.find(text);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(text, encode(*frozen_, text)).first->second;
}

double loss_bias_value(const EncoderModel& model, const Corpus& corpus,
                       const std::vector<std::string>& anchor_ids, const NeighborhoodMap& hoods,
                       const WordLists& lists, double temperature) {
    std::unordered_map<std::string, double> d_cache;
    auto d_of = [&](const std::string& id) {
        const auto it = d_cache.find(id);
        if (it != d_cache.end()) return it->second;
        const PairwiseGroup* g = corpus.find(id);
        if (g == nullptr) throw DataError("loss_bias: unknown group '" + id + "'");
        const double d = bias_measure(model, *g, lists, temperature);
        d_cache.emplace(id, d);
        return d;
    };
    double total = 0.0;
    for (const auto& anchor : anchor_ids) {
        const auto hit = hoods.find(anchor);
        if (hit == hoods.end()) throw DataError("loss_bias: no neighborhood for '" + anchor + "'");
        const KnnNeighborhood& hood = hit->second;
        for (size_t k = 0; k < hood.neighbor_ids.size(); ++k) {
            total += d_of(hood.neighbor_ids[k]) * hood.weights[k];
        }
    }
    return total;
}

double loss_repr_value(const EncoderModel& model, const EncoderModel& frozen,
                       const std::vector<std::string>& sentences) {
    double sum = 0.0;
    size_t entries = 0;
    for (const auto& s : sentences) {
        const Mat a = encode(model, s);
        const Mat b = encode(frozen, s);
        for (size_t i = 0; i < a.size(); ++i) {
            const double d = a.a[i] - b.a[i];
            sum += d * d;
        }
        entries += a.size();
    }
    if (entries == 0) throw DataError("loss_repr: no sentences");
    return sum / static_cast<double>(entries);
}

namespace {

// Distributions R for every variant of a group, built on the tape so that
// gradients flow through both the variant sentences and the target
// prototypes.
struct GroupNodes {
    std::vector<Tape::NodeId> hidden;  // per variant, L x d
    Tape::NodeId d_node = -1;          // scalar D
};

GroupNodes build_group_nodes(Tape& tape, const BoundParams& bp, const EncoderModel& model,
                             const PairwiseGroup& group,
                             const std::vector<Tape::NodeId>& prototype_nodes,
                             double temperature) {
    GroupNodes out;
    std::vector<Tape::NodeId> dists;
    for (const auto& v : group.variants) {
        const std::vector<int> ids = text_to_ids(model, v.text);
        const Tape::NodeId h = encode_on_tape(tape, bp, model.config, ids);
        out.hidden.push_back(h);
        const std::vector<int> positions = word_positions(v.text, v.attribute);
        if (positions.empty()) {
            throw DataError("group '" + group.group_id + "': attribute '" + v.attribute +
                            "' not found in variant text");
        }
        const Tape::NodeId w = tape.mean_rows(tape.rows(h, positions));
        std::vector<Tape::NodeId> cosines;
        cosines.reserve(prototype_nodes.size());
        for (const Tape::NodeId proto : prototype_nodes) {
            cosines.push_back(tape.cosine(w, proto));
        }
        const Tape::NodeId scores = tape.scale(tape.concat_cols(cosines), 1.0 / temperature);
        dists.push_back(tape.softmax_rows(scores));
    }
    std::vector<Tape::NodeId> pair_terms;
    for (size_t i = 0; i < dists.size(); ++i) {
        for (size_t j = i + 1; j < dists.size(); ++j) {
            pair_terms.push_back(tape.jsd(dists[i], dists[j]));
        }
    }
    out.d_node = tape.add_many(pair_terms);
    return out;
}

}  // namespace

BatchLoss build_batch_loss(const EncoderModel& model, FrozenStateCache& frozen_states,
                           const Corpus& corpus, const std::vector<std::string>& anchor_ids,
                           const NeighborhoodMap& hoods, const WordLists& lists,
                           double temperature, double lambda) {
    BatchLoss bl;
    bl.bound = bind_params(bl.tape, model);
    Tape& tape = bl.tape;

    // Target prototypes, recomputed on this tape so gradients reach them.
    std::vector<Tape::NodeId> prototype_nodes;
    prototype_nodes.reserve(lists.targets.size());
    for (const auto& t : lists.targets) {
        const std::string templ = target_template(t);
        const Tape::NodeId h = encode_on_tape(tape, bl.bound, model.config,
                                              text_to_ids(model, templ));
        prototype_nodes.push_back(tape.mean_rows(tape.rows(h, word_positions(templ, t))));
    }

    // Every distinct group the batch touches, anchors first.
    std::vector<std::string> group_order;
    std::set<std::string> seen;
    for (const auto& anchor : anchor_ids) {
        const auto hit = hoods.find(anchor);
        if (hit == hoods.end()) {
            throw DataError("build_batch_loss: no neighborhood for '" + anchor + "'");
        }
        for (const auto& id : hit->second.neighbor_ids) {
            if (seen.insert(id).second) group_order.push_back(id);
        }
    }

    std::unordered_map<std::string, GroupNodes> nodes;
    for (const auto& id : group_order) {
        const PairwiseGroup* g = corpus.find(id);
        if (g == nullptr) throw DataError("build_batch_loss: unknown group '" + id + "'");
        nodes.emplace(id, build_group_nodes(tape, bl.bound, model, *g, prototype_nodes,
                                            temperature));
    }

    std::vector<Tape::NodeId> bias_terms;
    for (const auto& anchor : anchor_ids) {
        const KnnNeighborhood& hood = hoods.at(anchor);
        for (size_t k = 0; k < hood.neighbor_ids.size(); ++k) {
            bias_terms.push_back(
                tape.scale(nodes.at(hood.neighbor_ids[k]).d_node, hood.weights[k]));
        }
    }
    const Tape::NodeId l_b = tape.add_many(bias_terms);

    std::vector<Tape::NodeId> repr_terms;
    size_t entries = 0;
    for (const auto& id : group_order) {
        const PairwiseGroup* g = corpus.find(id);
        const GroupNodes& gn = nodes.at(id);
        for (size_t vi = 0; vi < g->variants.size(); ++vi) {
            const Mat& target = frozen_states.states(g->variants[vi].text);
            entries += target.size();
            repr_terms.push_back(tape.sum_sq_diff(gn.hidden[vi], target));
        }
    }
    const Tape::NodeId l_r =
        tape.scale(tape.add_many(repr_terms), 1.0 / static_cast<double>(entries));

    bl.loss = tape.add(l_b, tape.scale(l_r, lambda));
    bl.bias_value = tape.val(l_b).at(0, 0);
    bl.repr_value = tape.val(l_r).at(0, 0);
    bl.total_value = tape.val(bl.loss).at(0, 0);
    return bl;
}

namespace {

double mean_d_over(const EncoderModel& model, const Corpus& corpus,
                   const std::vector<std::string>& ids, const WordLists& lists,
                   double temperature) {
    if (ids.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& id : ids) {
        const PairwiseGroup* g = corpus.find(id);
        if (g == nullptr) throw DataError("mean D: unknown group '" + id + "'");
        sum += bias_measure(model, *g, lists, temperature);
    }
    return sum / static_cast<double>(ids.size());
}

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        if (!out.empty()) out += ",";
        out += id;
    }
    return out;
}

}  // namespace

TrainLog train(EncoderModel& model, const EncoderModel& frozen, const Corpus& corpus,
               const std::vector<std::string>& kept_ids, const NeighborhoodMap& hoods,
               const TrainConfig& cfg, const std::vector<std::string>& heldout_sentences) {
    cfg.validate();
    TrainLog log;
    if (cfg.epochs == 0) return log;
    if (kept_ids.empty()) throw DataError("train: empty aligned set");

    const WordLists& lists = corpus.word_lists;
    FrozenStateCache frozen_states(frozen);

    std::vector<std::string> order = kept_ids;
    std::sort(order.begin(), order.end());

    const auto heldout_ppl = [&]() {
        return heldout_sentences.empty() ? 0.0 : pseudo_perplexity(model, heldout_sentences);
    };

    const auto epoch_pass = [&](bool update, Rng* rng) {
        std::vector<std::string> epoch_order = order;
        if (rng != nullptr) rng->shuffle(epoch_order);
        double bias_sum = 0.0;
        double repr_sum = 0.0;
        double total_sum = 0.0;
        int batches = 0;
        for (size_t start = 0; start < epoch_order.size();
             start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end =
                std::min(epoch_order.size(), start + static_cast<size_t>(cfg.batch_size));
            const std::vector<std::string> batch(epoch_order.begin() + start,
                                                 epoch_order.begin() + end);
            BatchLoss bl = build_batch_loss(model, frozen_states, corpus, batch, hoods, lists,
                                            cfg.temperature, cfg.lambda);
            if (!std::isfinite(bl.total_value)) {
                throw NumericError("train: non-finite loss in batch [" + join_ids(batch) + "]");
            }
            bias_sum += bl.bias_value;
            repr_sum += bl.repr_value;
            total_sum += bl.total_value;
            ++batches;
            if (update) {
                bl.tape.backward(bl.loss);
                apply_sgd(model, bl.tape, bl.bound, cfg.learning_rate);
            }
        }
        TrainLogRow row;
        row.loss_bias = bias_sum / static_cast<double>(order.size());
        row.loss_repr = repr_sum / batches;
        row.loss_total = total_sum / batches;
        return row;
    };

    // Epoch 0: state before any update.
    TrainLogRow first = epoch_pass(false, nullptr);
    first.epoch = 0;
    first.mean_d = mean_d_over(model, corpus, order, lists, cfg.temperature);
    first.heldout_ppl = heldout_ppl();
    log.rows.push_back(first);

    Rng rng(derive_seed(cfg.seed, "train.shuffle"));
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        TrainLogRow row = epoch_pass(true, &rng);
        row.epoch = epoch;
        row.mean_d = mean_d_over(model, corpus, order, lists, cfg.temperature);
        row.heldout_ppl = heldout_ppl();
        log.rows.push_back(row);
    }
    return log;
}

void write_train_log_csv(const TrainLog& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write train log: " + path);
    out << "epoch,loss_bias,loss_repr,loss_total,mean_d,heldout_ppl\n";
    out.precision(17);
    for (const auto& r : log.rows) {
        out << r.epoch << "," << r.loss_bias << "," << r.loss_repr << "," << r.loss_total << ","
            << r.mean_d << "," << r.heldout_ppl << "\n";
    }
}

void write_train_log_json(const TrainLog& log, const std::string& path) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : log.rows) {
        rows.push_back({{"epoch", r.epoch},
                        {"loss_bias", r.loss_bias},
                        {"loss_repr", r.loss_repr},
                        {"loss_total", r.loss_total},
                        {"mean_d", r.mean_d},
                        {"heldout_ppl", r.heldout_ppl}});
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write train log: " + path);
    out << nlohmann::ordered_json{{"rows", std::move(rows)}}.dump(2) << "\n";
}

}  // namespace debias
