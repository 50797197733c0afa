// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "debias/mat.hpp"
#include "debias/tape.hpp"

namespace debias {

// Whitespace/punctuation word tokenizer with dense ids. Ids 0..2 are the
// [PAD], [MASK], [UNK] specials; word ids follow in sorted order.
class WordTokenizer {
  public:
    static constexpr int kPad = 0;
    static constexpr int kMask = 1;
    static constexpr int kUnk = 2;

    static WordTokenizer build(const std::vector<std::string>& sentences);

    int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
    int id_of(const std::string& token) const;  // kUnk when absent
    const std::string& token_of(int id) const { return id_to_token_[id]; }

    std::vector<int> encode(const std::string& text) const;

    const std::vector<std::string>& tokens() const { return id_to_token_; }
    static WordTokenizer from_tokens(std::vector<std::string> id_to_token);

  private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

struct EncoderConfig {
    int d_model = 64;
    int layers = 2;
    int heads = 2;
    int max_len = 32;
    uint64_t seed = 0;

    int head_dim() const { return d_model / heads; }
    int ffn_dim() const { return 4 * d_model; }
    void validate() const;
};

// A small trainable masked language model. Two instances realize the frozen
// reference and the model being debiased; snapshot() moves between them.
struct EncoderModel {
    EncoderConfig config;
    WordTokenizer tokenizer;

    Mat tok_emb;  // V x d, shared with the MLM head (tied weights)
    Mat pos_emb;  // max_len x d

    struct Layer {
        Mat ln1_g, ln1_b;
        Mat wq, bq, wk, bk, wv, bv, wo, bo;
        Mat ln2_g, ln2_b;
        Mat w1, b1, w2, b2;
    };
    std::vector<Layer> layers;

    Mat lnf_g, lnf_b;
    Mat mlm_bias;  // 1 x V

    static EncoderModel init(const EncoderConfig& config, WordTokenizer tokenizer);

    int vocab_size() const { return tokenizer.vocab_size(); }

    // Visits every parameter in one canonical order (used for binding,
    // gradient collection, SGD updates and checkpoints).
    void for_each_param(const std::function<void(const std::string&, Mat&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Mat&)>& fn) const;

    bool finite() const;
};

// Deep copy whose parameters stay fixed while the original keeps training.
EncoderModel snapshot(const EncoderModel& model);

// Parameter leaves registered on a tape, in canonical order.
struct BoundParams {
    std::vector<Tape::NodeId> ordered;
    std::vector<std::string> names;
};

BoundParams bind_params(Tape& tape, const EncoderModel& model);

// Final-layer hidden states (L x d) for a token-id sequence.
Tape::NodeId encode_on_tape(Tape& tape, const BoundParams& bp, const EncoderConfig& cfg,
                            const std::vector<int>& ids);

// Tied-head vocabulary logits for the given hidden-state node.
Tape::NodeId mlm_logits_on_tape(Tape& tape, const BoundParams& bp, Tape::NodeId hidden);

// After tape.backward(), per-parameter gradients in canonical order.
std::vector<Mat> collect_param_grads(const Tape& tape, const BoundParams& bp);

// model.param -= lr * grad for every parameter; throws NumericError on
// non-finite gradients.
void apply_sgd(EncoderModel& model, const Tape& tape, const BoundParams& bp, double lr);

// Tokenize and check length; throws DataError on empty or over-length text.
std::vector<int> text_to_ids(const EncoderModel& model, const std::string& text);

// Forward pass, one d_model row per token.
Mat encode(const EncoderModel& model, const std::string& text);
Mat encode_ids(const EncoderModel& model, const std::vector<int>& ids);

// Mean pooling over token vectors.
Mat sentence_repr(const Mat& hidden);

// Token positions (all sub-positions of all occurrences) of `word` in `text`.
std::vector<int> word_positions(const std::string& text, const std::string& word);

// Mean of final-layer states over every occurrence of `word`.
Mat word_in_context_repr(const EncoderModel& model, const std::string& text,
                         const std::string& word);

// Sum over positions t of log p(token_t | text with t masked); always <= 0.
double pseudo_log_likelihood(const EncoderModel& model, const std::string& text);

void save_checkpoint(const EncoderModel& model, const std::string& path);
EncoderModel load_checkpoint(const std::string& path);

struct PretrainConfig {
    int epochs = 20;
    double learning_rate = 1e-2;
    double mask_prob = 0.15;
    int batch_size = 16;
    uint64_t seed = 0;
    // Adam moments; plain SGD starves the attention pathways at this scale.
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Masked-LM pretraining over raw sentences with Adam; returns mean masked
// cross-entropy per epoch.
std::vector<double> pretrain_mlm(EncoderModel& model, const std::vector<std::string>& sentences,
                                 const PretrainConfig& cfg);

}  // namespace debias
