// SPDX-License-Identifier: Apache-2.0
#include "debias/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "debias/errors.hpp"
#include "debias/rng.hpp"
#include "debias/text.hpp"

namespace debias {

// ---------------------------------------------------------------- tokenizer

WordTokenizer WordTokenizer::build(const std::vector<std::string>& sentences) {
    std::set<std::string> words;
    for (const auto& s : sentences) {
        for (auto& t : tokenize(s)) words.insert(std::move(t));
    }
    std::vector<std::string> id_to_token = {"[PAD]", "[MASK]", "[UNK]"};
    id_to_token.insert(id_to_token.end(), words.begin(), words.end());
    return from_tokens(std::move(id_to_token));
}

WordTokenizer WordTokenizer::from_tokens(std::vector<std::string> id_to_token) {
    WordTokenizer tk;
    tk.id_to_token_ = std::move(id_to_token);
    for (size_t i = 0; i < tk.id_to_token_.size(); ++i) {
        tk.token_to_id_.emplace(tk.id_to_token_[i], static_cast<int>(i));
    }
    return tk;
}

int WordTokenizer::id_of(const std::string& token) const {
    const auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

std::vector<int> WordTokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(text)) ids.push_back(id_of(t));
    return ids;
}

// ------------------------------------------------------------------- model

void EncoderConfig::validate() const {
    if (d_model <= 0 || layers <= 0 || heads <= 0 || max_len <= 0) {
        throw ConfigError("encoder config: all dimensions must be positive");
    }
    if (d_model % heads != 0) {
        throw ConfigError("encoder config: d_model (" + std::to_string(d_model) +
                          ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
}

EncoderModel EncoderModel::init(const EncoderConfig& config, WordTokenizer tokenizer) {
    config.validate();
    EncoderModel m;
    m.config = config;
    m.tokenizer = std::move(tokenizer);
    const int d = config.d_model;
    const int v = m.tokenizer.vocab_size();

    Rng rng(config.seed);
    // Fan-in scaling keeps attention scores and tied-head logits at O(1):
    // layer-norm feeds unit-variance rows into every weight matrix.
    auto gaussian = [&rng](Mat& w, int fan_in) {
        const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& x : w.a) x = rng.normal(0.0, stddev);
    };

    m.tok_emb = Mat(v, d);
    gaussian(m.tok_emb, d);
    m.pos_emb = Mat(config.max_len, d);
    gaussian(m.pos_emb, d);

    m.layers.resize(config.layers);
    for (auto& l : m.layers) {
        l.ln1_g = Mat(1, d);
        l.ln1_g.fill(1.0);
        l.ln1_b = Mat(1, d);
        l.wq = Mat(d, d);
        gaussian(l.wq, d);
        l.bq = Mat(1, d);
        l.wk = Mat(d, d);
        gaussian(l.wk, d);
        l.bk = Mat(1, d);
        l.wv = Mat(d, d);
        gaussian(l.wv, d);
        l.bv = Mat(1, d);
        l.wo = Mat(d, d);
        gaussian(l.wo, d);
        l.bo = Mat(1, d);
        l.ln2_g = Mat(1, d);
        l.ln2_g.fill(1.0);
        l.ln2_b = Mat(1, d);
        // The position-local FFN starts small; at full fan-in scale it wins
        // the race against attention and the model never learns to use
        // context.
        l.w1 = Mat(d, config.ffn_dim());
        gaussian(l.w1, d);
        for (double& x : l.w1.a) x *= 0.1;
        l.b1 = Mat(1, config.ffn_dim());
        l.w2 = Mat(config.ffn_dim(), d);
        gaussian(l.w2, config.ffn_dim());
        for (double& x : l.w2.a) x *= 0.1;
        l.b2 = Mat(1, d);
    }
    m.lnf_g = Mat(1, d);
    m.lnf_g.fill(1.0);
    m.lnf_b = Mat(1, d);
    m.mlm_bias = Mat(1, v);
    return m;
}

void EncoderModel::for_each_param(const std::function<void(const std::string&, Mat&)>& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        Layer& l = layers[i];
        fn(p + "ln1_g", l.ln1_g);
        fn(p + "ln1_b", l.ln1_b);
        fn(p + "wq", l.wq);
        fn(p + "bq", l.bq);
        fn(p + "wk", l.wk);
        fn(p + "bk", l.bk);
        fn(p + "wv", l.wv);
        fn(p + "bv", l.bv);
        fn(p + "wo", l.wo);
        fn(p + "bo", l.bo);
        fn(p + "ln2_g", l.ln2_g);
        fn(p + "ln2_b", l.ln2_b);
        fn(p + "w1", l.w1);
        fn(p + "b1", l.b1);
        fn(p + "w2", l.w2);
        fn(p + "b2", l.b2);
    }
    fn("lnf_g", lnf_g);
    fn("lnf_b", lnf_b);
    fn("mlm_bias", mlm_bias);
}

void EncoderModel::for_each_param(
    const std::function<void(const std::string&, const Mat&)>& fn) const {
    const_cast<EncoderModel*>(this)->for_each_param(
        [&fn](const std::string& name, Mat& m) { fn(name, m); });
}

bool EncoderModel::finite() const {
    bool ok = true;
    for_each_param([&ok](const std::string&, const Mat& m) { ok = ok && all_finite(m); });
    return ok;
}

EncoderModel snapshot(const EncoderModel& model) { return model; }

// ----------------------------------------------------------------- forward

BoundParams bind_params(Tape& tape, const EncoderModel& model) {
    BoundParams bp;
    model.for_each_param([&](const std::string& name, const Mat& m) {
        bp.names.push_back(name);
        bp.ordered.push_back(tape.leaf(m));
    });
    return bp;
}

namespace {

// Indices into BoundParams::ordered, mirroring for_each_param order.
constexpr int kTokEmb = 0;
constexpr int kPosEmb = 1;
constexpr int kPerLayer = 16;
int layer_base(int layer) { return 2 + layer * kPerLayer; }

Tape::NodeId attention_block(Tape& t, const BoundParams& bp, const EncoderConfig& cfg,
                             Tape::NodeId x, int layer) {
    const int base = layer_base(layer);
    const auto p = [&](int off) { return bp.ordered[base + off]; };
    // offsets: 2 wq, 3 bq, 4 wk, 5 bk, 6 wv, 7 bv, 8 wo, 9 bo
    const Tape::NodeId q = t.add_rowvec(t.matmul(x, p(2)), p(3));
    const Tape::NodeId k = t.add_rowvec(t.matmul(x, p(4)), p(5));
    const Tape::NodeId v = t.add_rowvec(t.matmul(x, p(6)), p(7));
    const int dh = cfg.head_dim();
    std::vector<Tape::NodeId> heads;
    for (int h = 0; h < cfg.heads; ++h) {
        const int c0 = h * dh;
        const int c1 = c0 + dh;
        const Tape::NodeId qh = t.slice_cols(q, c0, c1);
        const Tape::NodeId kh = t.slice_cols(k, c0, c1);
        const Tape::NodeId vh = t.slice_cols(v, c0, c1);
        const Tape::NodeId scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
        const Tape::NodeId attn = t.softmax_rows(scores);
        heads.push_back(t.matmul(attn, vh));
    }
    const Tape::NodeId merged = cfg.heads == 1 ? heads[0] : t.concat_cols(heads);
    return t.add_rowvec(t.matmul(merged, p(8)), p(9));
}

Tape::NodeId ffn_block(Tape& t, const BoundParams& bp, Tape::NodeId x, int layer) {
    const int base = layer_base(layer);
    const auto p = [&](int off) { return bp.ordered[base + off]; };
    // offsets: 12 w1, 13 b1, 14 w2, 15 b2
    const Tape::NodeId h = t.gelu(t.add_rowvec(t.matmul(x, p(12)), p(13)));
    return t.add_rowvec(t.matmul(h, p(14)), p(15));
}

}  // namespace

Tape::NodeId encode_on_tape(Tape& t, const BoundParams& bp, const EncoderConfig& cfg,
                            const std::vector<int>& ids) {
    if (ids.empty()) throw DataError("encode: empty token sequence");
    if (static_cast<int>(ids.size()) > cfg.max_len) {
        throw DataError("encode: input of " + std::to_string(ids.size()) +
                        " tokens exceeds max_len " + std::to_string(cfg.max_len));
    }
    std::vector<int> positions(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);

    Tape::NodeId x = t.add(t.rows(bp.ordered[kTokEmb], ids), t.rows(bp.ordered[kPosEmb], positions));
    for (int layer = 0; layer < cfg.layers; ++layer) {
        const int base = layer_base(layer);
        const Tape::NodeId n1 =
            t.layer_norm(x, bp.ordered[base + 0], bp.ordered[base + 1]);
        x = t.add(x, attention_block(t, bp, cfg, n1, layer));
        const Tape::NodeId n2 =
            t.layer_norm(x, bp.ordered[base + 10], bp.ordered[base + 11]);
        x = t.add(x, ffn_block(t, bp, n2, layer));
    }
    const int fin = 2 + cfg.layers * kPerLayer;
    return t.layer_norm(x, bp.ordered[fin], bp.ordered[fin + 1]);
}

Tape::NodeId mlm_logits_on_tape(Tape& t, const BoundParams& bp, Tape::NodeId hidden) {
    const int fin = static_cast<int>(bp.ordered.size()) - 1;  // mlm_bias is last
    return t.add_rowvec(t.matmul_nt(hidden, bp.ordered[kTokEmb]), bp.ordered[fin]);
}

std::vector<Mat> collect_param_grads(const Tape& tape, const BoundParams& bp) {
    std::vector<Mat> grads;
    grads.reserve(bp.ordered.size());
    for (const Tape::NodeId id : bp.ordered) grads.push_back(tape.grad(id));
    return grads;
}

void apply_sgd(EncoderModel& model, const Tape& tape, const BoundParams& bp, double lr) {
    size_t i = 0;
    bool finite = true;
    model.for_each_param([&](const std::string&, Mat& m) {
        const Mat& g = tape.grad(bp.ordered[i]);
        finite = finite && all_finite(g);
        axpy(m, -lr, g);
        ++i;
    });
    if (!finite) throw NumericError("sgd update: non-finite gradient");
}

// --------------------------------------------------------------- inference

std::vector<int> text_to_ids(const EncoderModel& model, const std::string& text) {
    const std::vector<int> ids = model.tokenizer.encode(text);
    if (ids.empty()) throw DataError("encode: text has no tokens: '" + text + "'");
    if (static_cast<int>(ids.size()) > model.config.max_len) {
        throw DataError("encode: text of " + std::to_string(ids.size()) +
                        " tokens exceeds max_len " + std::to_string(model.config.max_len) +
                        ": '" + text + "'");
    }
    return ids;
}

Mat encode_ids(const EncoderModel& model, const std::vector<int>& ids) {
    Tape tape;
    const BoundParams bp = bind_params(tape, model);
    return tape.val(encode_on_tape(tape, bp, model.config, ids));
}

Mat encode(const EncoderModel& model, const std::string& text) {
    return encode_ids(model, text_to_ids(model, text));
}

Mat sentence_repr(const Mat& hidden) {
    if (hidden.rows == 0) throw DataError("sentence_repr: empty hidden sequence");
    Mat out(1, hidden.cols);
    for (int i = 0; i < hidden.rows; ++i) {
        for (int j = 0; j < hidden.cols; ++j) out.at(0, j) += hidden.at(i, j);
    }
    for (double& v : out.a) v /= hidden.rows;
    return out;
}

std::vector<int> word_positions(const std::string& text, const std::string& word) {
    const std::vector<std::string> needle = tokenize(word);
    const std::vector<std::string> tokens = tokenize(text);
    std::vector<int> positions;
    for (const int s : find_token_subsequence(tokens, needle)) {
        for (size_t k = 0; k < needle.size(); ++k) positions.push_back(s + static_cast<int>(k));
    }
    return positions;
}

Mat word_in_context_repr(const EncoderModel& model, const std::string& text,
                         const std::string& word) {
    const std::vector<int> positions = word_positions(text, word);
    if (positions.empty()) {
        throw DataError("word_in_context_repr: '" + word + "' absent from '" + text + "'");
    }
    const Mat h = encode(model, text);
    Mat out(1, h.cols);
    for (const int p : positions) {
        for (int j = 0; j < h.cols; ++j) out.at(0, j) += h.at(p, j);
    }
    for (double& v : out.a) v /= static_cast<double>(positions.size());
    return out;
}

double pseudo_log_likelihood(const EncoderModel& model, const std::string& text) {
    const std::vector<int> ids = text_to_ids(model, text);
    const int n = static_cast<int>(ids.size());
    Tape tape;
    const BoundParams bp = bind_params(tape, model);
    double total = 0.0;
    for (int t = 0; t < n; ++t) {
        std::vector<int> masked = ids;
        masked[t] = WordTokenizer::kMask;
        const Tape::NodeId h = encode_on_tape(tape, bp, model.config, masked);
        const Tape::NodeId ht = tape.rows(h, {t});
        const Tape::NodeId logits = mlm_logits_on_tape(tape, bp, ht);
        const Mat& row = tape.val(logits);
        double m = row.at(0, 0);
        for (int j = 1; j < row.cols; ++j) m = std::max(m, row.at(0, j));
        double z = 0.0;
        for (int j = 0; j < row.cols; ++j) z += std::exp(row.at(0, j) - m);
        total += row.at(0, ids[t]) - m - std::log(z);
    }
    return total;
}

// ------------------------------------------------------------- checkpoints

namespace {
constexpr char kMagic[4] = {'D', 'B', 'C', 'K'};
constexpr uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const EncoderModel& model, const std::string& path) {
    nlohmann::ordered_json header;
    header["config"] = {{"d_model", model.config.d_model},
                        {"layers", model.config.layers},
                        {"heads", model.config.heads},
                        {"max_len", model.config.max_len},
                        {"seed", model.config.seed}};
    header["tokenizer"] = model.tokenizer.tokens();
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    model.for_each_param([&](const std::string& name, const Mat& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows}, {"cols", m.cols}});
    });
    header["tensors"] = std::move(tensors);
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    const uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    model.for_each_param([&](const std::string&, const Mat& m) {
        out.write(reinterpret_cast<const char*>(m.a.data()),
                  static_cast<std::streamsize>(m.a.size() * sizeof(double)));
    });
    if (!out) throw DataError("short write on checkpoint: " + path);
}

EncoderModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw DataError("truncated checkpoint header: " + path);
    const nlohmann::json header = nlohmann::json::parse(hs);

    EncoderConfig cfg;
    cfg.d_model = header.at("config").at("d_model").get<int>();
    cfg.layers = header.at("config").at("layers").get<int>();
    cfg.heads = header.at("config").at("heads").get<int>();
    cfg.max_len = header.at("config").at("max_len").get<int>();
    cfg.seed = header.at("config").at("seed").get<uint64_t>();

    EncoderModel model = EncoderModel::init(
        cfg, WordTokenizer::from_tokens(header.at("tokenizer").get<std::vector<std::string>>()));

    size_t idx = 0;
    const auto& tensors = header.at("tensors");
    bool ok = true;
    model.for_each_param([&](const std::string& name, Mat& m) {
        const auto& tj = tensors.at(idx++);
        if (tj.at("name").get<std::string>() != name || tj.at("rows").get<int>() != m.rows ||
            tj.at("cols").get<int>() != m.cols) {
            ok = false;
            return;
        }
        in.read(reinterpret_cast<char*>(m.a.data()),
                static_cast<std::streamsize>(m.a.size() * sizeof(double)));
    });
    if (!ok || !in) throw DataError("checkpoint tensor mismatch: " + path);
    return model;
}

// -------------------------------------------------------------- pretraining

namespace {

// Adam state aligned with the canonical parameter order.
struct AdamState {
    std::vector<Mat> m;
    std::vector<Mat> v;
    long step = 0;
};

void apply_adam(EncoderModel& model, const Tape& tape, const BoundParams& bp, AdamState& state,
                const PretrainConfig& cfg) {
    if (state.m.empty()) {
        model.for_each_param([&](const std::string&, Mat& p) {
            state.m.emplace_back(p.rows, p.cols);
            state.v.emplace_back(p.rows, p.cols);
        });
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    size_t i = 0;
    bool finite = true;
    model.for_each_param([&](const std::string&, Mat& p) {
        const Mat& g = tape.grad(bp.ordered[i]);
        finite = finite && all_finite(g);
        Mat& m = state.m[i];
        Mat& v = state.v[i];
        for (size_t k = 0; k < p.size(); ++k) {
            m.a[k] = cfg.beta1 * m.a[k] + (1.0 - cfg.beta1) * g.a[k];
            v.a[k] = cfg.beta2 * v.a[k] + (1.0 - cfg.beta2) * g.a[k] * g.a[k];
            const double mhat = m.a[k] / bc1;
            const double vhat = v.a[k] / bc2;
            p.a[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        ++i;
    });
    if (!finite) throw NumericError("adam update: non-finite gradient");
}

}  // namespace

std::vector<double> pretrain_mlm(EncoderModel& model, const std::vector<std::string>& sentences,
                                 const PretrainConfig& cfg) {
    if (sentences.empty()) throw DataError("pretrain: no sentences");
    std::vector<std::vector<int>> encoded;
    encoded.reserve(sentences.size());
    for (const auto& s : sentences) encoded.push_back(text_to_ids(model, s));

    Rng rng(cfg.seed);
    std::vector<size_t> order(encoded.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    AdamState adam;
    std::vector<double> epoch_losses;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        size_t masked_total = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            Tape tape;
            const BoundParams bp = bind_params(tape, model);
            std::vector<Tape::NodeId> terms;
            int batch_masked = 0;
            for (size_t i = start; i < end; ++i) {
                const std::vector<int>& ids = encoded[order[i]];
                const int n = static_cast<int>(ids.size());
                std::vector<int> positions;
                for (int t = 0; t < n; ++t) {
                    if (rng.uniform() < cfg.mask_prob) positions.push_back(t);
                }
                if (positions.empty()) positions.push_back(rng.uniform_int(n));
                std::vector<int> masked = ids;
                for (const int p : positions) masked[p] = WordTokenizer::kMask;
                const Tape::NodeId h = encode_on_tape(tape, bp, model.config, masked);
                const Tape::NodeId logits = mlm_logits_on_tape(tape, bp, h);
                batch_masked += static_cast<int>(positions.size());
                terms.push_back(tape.cross_entropy_masked(logits, ids, positions));
            }
            const Tape::NodeId sum = tape.add_many(terms);
            const Tape::NodeId loss = tape.scale(sum, 1.0 / batch_masked);
            loss_sum += tape.val(sum).at(0, 0);
            masked_total += static_cast<size_t>(batch_masked);
            tape.backward(loss);
            apply_adam(model, tape, bp, adam, cfg);
        }
        epoch_losses.push_back(loss_sum / static_cast<double>(masked_total));
    }
    return epoch_losses;
}

}  // namespace debias
