// SPDX-License-Identifier: Apache-2.0
#include "debias/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "debias/errors.hpp"
#include "debias/text.hpp"

namespace debias {

namespace {

std::ifstream open_or_throw(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);
    return in;
}

}  // namespace

bool WordLists::is_attribute_word(const std::string& w) const {
    for (const auto& tuple : attribute_tuples) {
        for (const auto& a : tuple) {
            if (a == w) return true;
        }
    }
    return false;
}

WordLists word_lists_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("attributes") || !j.contains("targets")) {
        throw DataError("word lists must be an object with \"attributes\" and \"targets\"");
    }
    WordLists lists;
    for (const auto& tuple : j.at("attributes")) {
        std::vector<std::string> words;
        for (const auto& w : tuple) words.push_back(lower_ascii(w.get<std::string>()));
        lists.attribute_tuples.push_back(std::move(words));
    }
    for (const auto& w : j.at("targets")) {
        lists.targets.push_back(lower_ascii(w.get<std::string>()));
    }

    if (lists.attribute_tuples.empty()) throw DataError("word lists: no attribute tuples");
    if (lists.targets.empty()) throw DataError("word lists: empty targets");

    const size_t d = lists.attribute_tuples[0].size();
    if (d < 2) {
        throw DataError("word lists: attribute tuple arity must be >= 2, got " +
                        std::to_string(d));
    }
    for (const auto& tuple : lists.attribute_tuples) {
        if (tuple.size() != d) {
            throw DataError("word lists: ragged tuple arity at tuple starting with '" +
                            (tuple.empty() ? std::string("?") : tuple[0]) + "'");
        }
        std::set<std::string> seen;
        for (const auto& w : tuple) {
            if (w.empty()) throw DataError("word lists: empty attribute word");
            if (!seen.insert(w).second) {
                throw DataError("word lists: duplicate word within tuple: '" + w + "'");
            }
        }
    }
    std::set<std::string> target_set;
    for (const auto& t : lists.targets) {
        if (t.empty()) throw DataError("word lists: empty target word");
        if (!target_set.insert(t).second) {
            throw DataError("word lists: duplicate target word: '" + t + "'");
        }
        if (lists.is_attribute_word(t)) {
            throw DataError("word lists: target overlaps attribute word: '" + t + "'");
        }
    }
    return lists;
}

WordLists parse_word_lists(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("word lists: invalid JSON in " + path + ": " + e.what());
    }
    return word_lists_from_json(j);
}

double PairwiseGroup::max_toxicity() const {
    if (toxicity.empty()) throw DataError("group '" + group_id + "' has no toxicity scores");
    return *std::max_element(toxicity.begin(), toxicity.end());
}

const GroupVariant& PairwiseGroup::variant(int attribute_index) const {
    for (const auto& v : variants) {
        if (v.attribute_index == attribute_index) return v;
    }
    throw DataError("group '" + group_id + "' lacks attribute index " +
                    std::to_string(attribute_index));
}

const PairwiseGroup* Corpus::find(const std::string& group_id) const {
    for (const auto& g : groups) {
        if (g.group_id == group_id) return &g;
    }
    return nullptr;
}

std::optional<std::string> validate_group(const PairwiseGroup& g, const WordLists& lists) {
    const int d = lists.arity();
    if (g.group_id.empty()) return "empty group_id";
    if (std::find(lists.targets.begin(), lists.targets.end(), lower_ascii(g.target)) ==
        lists.targets.end()) {
        return "unknown target '" + g.target + "'";
    }
    std::vector<bool> have(d, false);
    for (const auto& v : g.variants) {
        if (v.attribute_index < 0 || v.attribute_index >= d) {
            return "attribute index " + std::to_string(v.attribute_index) + " out of range";
        }
        if (have[v.attribute_index]) {
            return "duplicate attribute index " + std::to_string(v.attribute_index);
        }
        have[v.attribute_index] = true;
    }
    for (int i = 0; i < d; ++i) {
        if (!have[i]) return "missing attribute index " + std::to_string(i);
    }

    // Variants must come from one attribute tuple, index-aligned.
    const std::vector<std::string>* tuple = nullptr;
    for (const auto& cand : lists.attribute_tuples) {
        bool ok = true;
        for (const auto& v : g.variants) {
            if (cand[v.attribute_index] != lower_ascii(v.attribute)) {
                ok = false;
                break;
            }
        }
        if (ok) {
            tuple = &cand;
            break;
        }
    }
    if (tuple == nullptr) return "variant attributes do not match any attribute tuple";

    for (const auto& v : g.variants) {
        if (!contains_word(v.text, v.attribute)) {
            return "variant " + std::to_string(v.attribute_index) + " lacks attribute word '" +
                   v.attribute + "'";
        }
        if (!contains_word(v.text, g.target)) {
            return "variant " + std::to_string(v.attribute_index) + " lacks target word '" +
                   g.target + "'";
        }
    }
    if (!g.toxicity.empty()) {
        if (static_cast<int>(g.toxicity.size()) != d) {
            return "toxicity list must have one score per variant";
        }
        for (const double s : g.toxicity) {
            if (!(s >= 0.0 && s <= 1.0)) return "toxicity score outside [0,1]";
        }
    }
    return std::nullopt;
}

nlohmann::ordered_json group_to_json(const PairwiseGroup& g) {
    nlohmann::ordered_json j;
    j["group_id"] = g.group_id;
    j["target"] = g.target;
    nlohmann::ordered_json vs = nlohmann::ordered_json::array();
    for (const auto& v : g.variants) {
        nlohmann::ordered_json vj;
        vj["attribute_index"] = v.attribute_index;
        vj["attribute"] = v.attribute;
        vj["text"] = v.text;
        vs.push_back(std::move(vj));
    }
    j["variants"] = std::move(vs);
    if (!g.toxicity.empty()) j["toxicity"] = g.toxicity;
    return j;
}

PairwiseGroup group_from_json(const nlohmann::json& j) {
    PairwiseGroup g;
    g.group_id = j.at("group_id").get<std::string>();
    g.target = lower_ascii(j.at("target").get<std::string>());
    for (const auto& vj : j.at("variants")) {
        GroupVariant v;
        v.attribute_index = vj.at("attribute_index").get<int>();
        v.attribute = lower_ascii(vj.at("attribute").get<std::string>());
        v.text = vj.at("text").get<std::string>();
        g.variants.push_back(std::move(v));
    }
    std::sort(g.variants.begin(), g.variants.end(),
              [](const GroupVariant& a, const GroupVariant& b) {
                  return a.attribute_index < b.attribute_index;
              });
    if (j.contains("toxicity")) g.toxicity = j.at("toxicity").get<std::vector<double>>();
    return g;
}

IngestResult ingest_groups_stream(std::istream& in, const WordLists& lists) {
    IngestResult result;
    result.corpus.word_lists = lists;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        PairwiseGroup g;
        try {
            g = group_from_json(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            result.rejects.push_back({line_no, std::string("malformed JSON: ") + e.what()});
            continue;
        }
        if (!seen_ids.insert(g.group_id).second) {
            result.rejects.push_back({line_no, "duplicate group_id '" + g.group_id + "'"});
            continue;
        }
        if (auto reason = validate_group(g, lists)) {
            result.rejects.push_back({line_no, *reason});
            continue;
        }
        result.corpus.groups.push_back(std::move(g));
    }
    return result;
}

IngestResult ingest_groups(const std::string& path, const WordLists& lists) {
    std::ifstream in = open_or_throw(path);
    return ingest_groups_stream(in, lists);
}

void write_corpus_jsonl(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write file: " + path);
    for (const auto& g : corpus.groups) out << group_to_json(g).dump() << "\n";
}

void write_validation_report(const std::vector<RejectedLine>& rejects, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write file: " + path);
    for (const auto& r : rejects) {
        nlohmann::ordered_json j;
        j["line"] = r.line;
        j["reason"] = r.reason;
        out << j.dump() << "\n";
    }
}

size_t keep_count(double fraction, size_t n) {
    return static_cast<size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

Corpus toxicity_filter(const Corpus& corpus, double keep_fraction) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
        throw ConfigError("toxicity keep_fraction must be in (0,1], got " +
                          std::to_string(keep_fraction));
    }
    for (const auto& g : corpus.groups) {
        if (!g.has_toxicity()) {
            throw DataError("toxicity filter: group '" + g.group_id + "' has no scores");
        }
    }
    std::vector<size_t> order(corpus.groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
        const double tx = corpus.groups[x].max_toxicity();
        const double ty = corpus.groups[y].max_toxicity();
        if (tx != ty) return tx < ty;
        return corpus.groups[x].group_id < corpus.groups[y].group_id;
    });

    Corpus kept;
    kept.word_lists = corpus.word_lists;
    const size_t n_keep = keep_count(keep_fraction, corpus.groups.size());
    for (size_t i = 0; i < n_keep; ++i) kept.groups.push_back(corpus.groups[order[i]]);
    return kept;
}

PronounMap default_pronoun_map() {
    return {{"he", "she"}, {"his", "her"}, {"him", "her"}, {"himself", "herself"}};
}

PronounMap pronoun_map_from_json(const nlohmann::json& j) {
    PronounMap map;
    for (const auto& pair : j.at("pairs")) {
        if (!pair.is_array() || pair.size() != 2) {
            throw DataError("pronoun map: each pair must be a 2-element array");
        }
        map.emplace_back(lower_ascii(pair[0].get<std::string>()),
                         lower_ascii(pair[1].get<std::string>()));
    }
    return map;
}

PronounMap load_pronoun_map(const std::string& path) {
    std::ifstream in = open_or_throw(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("pronoun map: invalid JSON in " + path + ": " + e.what());
    }
    return pronoun_map_from_json(j);
}

std::string counterfactual_swap(const std::string& text, const std::string& from_attr,
                                const std::string& to_attr, const PronounMap& pronouns) {
    const std::vector<std::string> from_tokens = tokenize(from_attr);
    if (from_tokens.empty()) throw DataError("counterfactual swap: empty source word");

    const std::vector<TokenSpan> spans = token_spans(text);
    std::vector<std::string> tokens;
    tokens.reserve(spans.size());
    for (const TokenSpan& s : spans) {
        tokens.push_back(lower_ascii(std::string_view(text).substr(s.begin, s.end - s.begin)));
    }

    const std::vector<int> starts = find_token_subsequence(tokens, from_tokens);
    if (starts.empty()) {
        throw DataError("counterfactual swap: '" + from_attr + "' absent from text");
    }

    // First-listed direction wins when a word appears in several pairs.
    std::unordered_map<std::string, std::string> exchange;
    for (const auto& [a, b] : pronouns) {
        exchange.emplace(a, b);
        exchange.emplace(b, a);
    }

    struct Edit {
        size_t begin;
        size_t end;
        std::string replacement;
    };
    std::vector<Edit> edits;
    std::vector<bool> consumed(tokens.size(), false);
    for (const int s : starts) {
        const size_t begin = spans[s].begin;
        const size_t end = spans[s + static_cast<int>(from_tokens.size()) - 1].end;
        const std::string_view original =
            std::string_view(text).substr(spans[s].begin, spans[s].end - spans[s].begin);
        edits.push_back({begin, end, match_leading_case(original, to_attr)});
        for (size_t k = 0; k < from_tokens.size(); ++k) consumed[s + k] = true;
    }
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (consumed[i]) continue;
        const auto it = exchange.find(tokens[i]);
        if (it == exchange.end()) continue;
        const std::string_view original =
            std::string_view(text).substr(spans[i].begin, spans[i].end - spans[i].begin);
        edits.push_back({spans[i].begin, spans[i].end, match_leading_case(original, it->second)});
    }

    std::sort(edits.begin(), edits.end(),
              [](const Edit& a, const Edit& b) { return a.begin > b.begin; });
    std::string out = text;
    for (const Edit& e : edits) out.replace(e.begin, e.end - e.begin, e.replacement);
    return out;
}

}  // namespace debias
