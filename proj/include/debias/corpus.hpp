// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace debias {

// Attribute d-tuples plus the demographic-neutral target words they must not
// associate with. All words are stored lowercase.
struct WordLists {
    std::vector<std::vector<std::string>> attribute_tuples;
    std::vector<std::string> targets;

    int arity() const {
        return attribute_tuples.empty() ? 0 : static_cast<int>(attribute_tuples[0].size());
    }
    bool is_attribute_word(const std::string& w) const;
};

WordLists word_lists_from_json(const nlohmann::json& j);
WordLists parse_word_lists(const std::string& path);

struct GroupVariant {
    int attribute_index = 0;
    std::string attribute;
    std::string text;
};

// One pairwise unit: d sentence variants sharing a target word and differing
// only in attribute words / mapped pronouns.
struct PairwiseGroup {
    std::string group_id;
    std::string target;
    std::vector<GroupVariant> variants;  // sorted by attribute_index
    std::vector<double> toxicity;        // empty or one score per variant

    bool has_toxicity() const { return !toxicity.empty(); }
    double max_toxicity() const;
    const GroupVariant& variant(int attribute_index) const;
};

struct Corpus {
    std::vector<PairwiseGroup> groups;
    WordLists word_lists;

    const PairwiseGroup* find(const std::string& group_id) const;
};

// Checks every group invariant; returns an explanation for the first
// violation, or nullopt when the group is valid against `lists`.
std::optional<std::string> validate_group(const PairwiseGroup& g, const WordLists& lists);

nlohmann::ordered_json group_to_json(const PairwiseGroup& g);
PairwiseGroup group_from_json(const nlohmann::json& j);

struct RejectedLine {
    int line = 0;  // 1-based
    std::string reason;
};

struct IngestResult {
    Corpus corpus;
    std::vector<RejectedLine> rejects;
};

IngestResult ingest_groups_stream(std::istream& in, const WordLists& lists);
IngestResult ingest_groups(const std::string& path, const WordLists& lists);

void write_corpus_jsonl(const Corpus& corpus, const std::string& path);
void write_validation_report(const std::vector<RejectedLine>& rejects, const std::string& path);

// Keeps the ceil(keep_fraction * N) groups with the lowest group toxicity
// (max over variants), ordered by (toxicity asc, group_id asc).
Corpus toxicity_filter(const Corpus& corpus, double keep_fraction);

// ceil(fraction * n) with a guard against float noise pushing an exact
// product above the next integer.
size_t keep_count(double fraction, size_t n);

// Pairs are oriented but applied as an exchange: both sides of each pair are
// rewritten to the other, so a symmetric map makes the swap an involution.
using PronounMap = std::vector<std::pair<std::string, std::string>>;

PronounMap default_pronoun_map();
PronounMap pronoun_map_from_json(const nlohmann::json& j);
PronounMap load_pronoun_map(const std::string& path);

// Replaces every token-boundary occurrence of from_attr with to_attr,
// exchanges mapped pronouns, and preserves leading capitals.
std::string counterfactual_swap(const std::string& text, const std::string& from_attr,
                                const std::string& to_attr, const PronounMap& pronouns);

}  // namespace debias
