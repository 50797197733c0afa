// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "debias/corpus.hpp"

namespace debias {

struct PromptPair {
    std::string p1;
    std::string p2;
    std::string attribute_i;
    std::string attribute_j;
    std::string target;
};

// The two fixed prompt texts with (a_i, target) and (a_i, a_j) substituted.
PromptPair render_prompts(const std::string& a_i, const std::string& a_j,
                          const std::string& target);

struct GenerationConfig {
    std::string endpoint_url;  // full URL of a chat-completion endpoint
    std::string model_name = "gpt-3.5-turbo";
    int sentences_per_prompt = 10;
    double timeout_seconds = 30.0;
    bool offline = true;
    std::string api_key_env = "LLM_API_KEY";  // bearer token read from this env var
    int max_retries = 3;
    double backoff_seconds = 0.25;
    int concurrency = 4;
    std::string cache_path;  // JSONL reply cache; empty disables caching
    uint64_t seed = 0;
    bool synthetic_toxicity = true;  // offline only: seeded stand-in scores

    void validate() const;
};

// Splits a reply into candidate sentences (numbered-list lines or plain
// lines) and keeps only those containing both required words at token
// boundaries. Throws DataError when nothing valid remains.
std::vector<std::string> extract_sentences(const std::string& reply_text,
                                           const std::string& required_a,
                                           const std::string& required_b);

std::vector<std::string> parse_reply(const std::string& reply_text, const PromptPair& expected);

struct GenerationOutcome {
    Corpus corpus;
    std::vector<std::string> dropped;  // log lines for invalid replies/groups
};

// For each (tuple, target) combination produces sentences_per_prompt groups.
// Offline mode fills deterministic slot templates and derives the paired
// variants via counterfactual_swap; online mode drives the configured
// chat-completion endpoint with the P1/P2 conversation.
GenerationOutcome generate_groups(const WordLists& lists, const GenerationConfig& cfg,
                                  const PronounMap& pronouns);

// First offline template, exposed for tests.
std::string offline_template(int slot, int d);

}  // namespace debias
