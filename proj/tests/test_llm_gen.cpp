// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "debias/errors.hpp"
#include "debias/llm_gen.hpp"
#include "debias/text.hpp"
#include "test_util.hpp"

using namespace debias;
using namespace debias::testutil;

TEST_CASE("render_prompts reproduces the fixed prompt texts") {
    const PromptPair p = render_prompts("he", "she", "boss");
    CHECK(p.p1 ==
          "Please generate ten sentences containing the words in a tuple (he, boss) "
          "simultaneously. Control the word count in every generated sentence to around 20. "
          "The generated sentences strive for creativity, diversity, and logic.");
    CHECK(p.p2 ==
          "Replace the term he to she, and correct personal pronouns in the above generated "
          "ten sentences.");
    CHECK(contains_word(p.p1, "he"));
    CHECK(contains_word(p.p1, "boss"));
    CHECK(contains_word(p.p2, "he"));
    CHECK(contains_word(p.p2, "she"));

    CHECK_THROWS_AS(render_prompts("he", "he", "boss"), DataError);
    CHECK_THROWS_AS(render_prompts("", "she", "boss"), DataError);
}

TEST_CASE("parse_reply keeps numbered lines with both words") {
    const PromptPair expected = render_prompts("he", "she", "boss");
    const auto sentences =
        parse_reply("1. He is a boss.\n2. He met the boss.", expected);
    REQUIRE(sentences.size() == 2);
    CHECK(sentences[0] == "He is a boss.");
    CHECK(sentences[1] == "He met the boss.");

    CHECK_THROWS_AS(parse_reply("1. She is a boss.", expected), DataError);

    const auto with_blanks =
        parse_reply("1. He is a boss.\n2. He met the boss.\n\n  \n", expected);
    CHECK(with_blanks == sentences);

    const auto unnumbered = parse_reply("He is a boss.\nnothing here\n- He saw the boss.",
                                        expected);
    REQUIRE(unnumbered.size() == 2);
    CHECK(unnumbered[1] == "He saw the boss.");
}

TEST_CASE("offline generation meets the per-combination group contract") {
    const WordLists lists = small_lists();
    GenerationConfig cfg;
    cfg.offline = true;
    cfg.sentences_per_prompt = 10;
    cfg.seed = 4;
    const GenerationOutcome out = generate_groups(lists, cfg, default_pronoun_map());
    CHECK(out.dropped.empty());
    // 1 tuple x 3 targets x 10
    CHECK(out.corpus.groups.size() == 30);
    for (const auto& g : out.corpus.groups) {
        CHECK(g.variants.size() == 2);
        CHECK_FALSE(validate_group(g, lists).has_value());
        CHECK(g.toxicity.size() == 2);
    }
    // Slot 0 uses the fixed first template.
    CHECK(out.corpus.groups[0].variants[0].text ==
          "The he worked as a boss and impressed everyone with his skill.");
    CHECK(out.corpus.groups[0].variants[1].text ==
          "The she worked as a boss and impressed everyone with her skill.");
}

TEST_CASE("offline generation is deterministic and ingest-stable") {
    const WordLists lists = small_lists();
    GenerationConfig cfg;
    cfg.offline = true;
    cfg.sentences_per_prompt = 25;
    cfg.seed = 9;
    const GenerationOutcome a = generate_groups(lists, cfg, default_pronoun_map());
    const GenerationOutcome b = generate_groups(lists, cfg, default_pronoun_map());
    REQUIRE(a.corpus.groups.size() == b.corpus.groups.size());
    for (size_t i = 0; i < a.corpus.groups.size(); ++i) {
        CHECK(group_to_json(a.corpus.groups[i]) == group_to_json(b.corpus.groups[i]));
    }

    std::stringstream buf;
    for (const auto& g : a.corpus.groups) buf << group_to_json(g).dump() << "\n";
    const IngestResult round = ingest_groups_stream(buf, lists);
    CHECK(round.rejects.empty());
    CHECK(round.corpus.groups.size() == a.corpus.groups.size());
}

TEST_CASE("offline paired variants differ only at attribute and pronoun tokens") {
    const WordLists lists = small_lists();
    GenerationConfig cfg;
    cfg.offline = true;
    cfg.sentences_per_prompt = 30;
    cfg.seed = 2;
    const PronounMap pronouns = default_pronoun_map();
    std::set<std::string> mapped;
    for (const auto& [a, b] : pronouns) {
        mapped.insert(a);
        mapped.insert(b);
    }
    const GenerationOutcome out = generate_groups(lists, cfg, pronouns);
    for (const auto& g : out.corpus.groups) {
        const auto t0 = tokenize(g.variants[0].text);
        const auto t1 = tokenize(g.variants[1].text);
        REQUIRE(t0.size() == t1.size());
        for (size_t i = 0; i < t0.size(); ++i) {
            if (t0[i] == t1[i]) continue;
            const bool attr_swap = t0[i] == "he" && t1[i] == "she";
            const bool pronoun_swap = mapped.count(t0[i]) > 0 && mapped.count(t1[i]) > 0;
            CAPTURE(g.group_id);
            CHECK((attr_swap || pronoun_swap));
        }
    }
}

// ------------------------------------------------------- online mode tests

namespace {

// Canned chat server: answers P1 with he-sentences and P2 with she-sentences.
struct StubServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::atomic<int> requests{0};
    std::atomic<int> failures_to_inject{0};

    explicit StubServer(int n_sentences = 3) {
        server.Post("/v1/chat/completions", [this, n_sentences](const httplib::Request& req,
                                                                httplib::Response& res) {
            ++requests;
            if (failures_to_inject.fetch_sub(1) > 0) {
                res.status = 500;
                res.set_content("boom", "text/plain");
                return;
            }
            const auto body = nlohmann::json::parse(req.body);
            const std::string content = body.at("messages").back().at("content");
            const bool is_p2 = content.rfind("Replace the term", 0) == 0;
            // The last user turn names (attr, target) in its fixed slots.
            std::string attr = "he";
            std::string target = "boss";
            if (is_p2) {
                std::stringstream ss(content);
                std::string w;
                std::vector<std::string> words;
                while (ss >> w) words.push_back(w);
                attr = words[5].substr(0, words[5].size() - 1);  // "she," -> "she"
                const auto p1 = nlohmann::json::parse(req.body)
                                    .at("messages")[0]
                                    .at("content")
                                    .get<std::string>();
                const size_t open = p1.find('(');
                const size_t comma = p1.find(',', open);
                const size_t close = p1.find(')', comma);
                target = p1.substr(comma + 2, close - comma - 2);
            } else {
                const size_t open = content.find('(');
                const size_t comma = content.find(',', open);
                const size_t close = content.find(')', comma);
                attr = content.substr(open + 1, comma - open - 1);
                target = content.substr(comma + 2, close - comma - 2);
            }
            std::string reply;
            for (int i = 1; i <= n_sentences; ++i) {
                reply += std::to_string(i) + ". The " + attr + " praised the " + target +
                         " number " + std::to_string(i) + ".\n";
            }
            nlohmann::json out = {
                {"choices", {{{"message", {{"role", "assistant"}, {"content", reply}}}}}}};
            res.set_content(out.dump(), "application/json");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }

    ~StubServer() {
        server.stop();
        thread.join();
    }

    std::string url() const {
        return "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
    }
};

GenerationConfig online_config(const StubServer& stub) {
    GenerationConfig cfg;
    cfg.offline = false;
    cfg.endpoint_url = stub.url();
    cfg.sentences_per_prompt = 3;
    cfg.timeout_seconds = 5.0;
    cfg.backoff_seconds = 0.001;
    cfg.api_key_env = "";
    return cfg;
}

}  // namespace

TEST_CASE("online generation assembles groups from the chat endpoint") {
    StubServer stub(3);
    const WordLists lists = small_lists();
    const GenerationConfig cfg = online_config(stub);
    const GenerationOutcome out = generate_groups(lists, cfg, default_pronoun_map());
    CHECK(out.dropped.empty());
    // 1 tuple x 3 targets x 3 lines
    CHECK(out.corpus.groups.size() == 9);
    for (const auto& g : out.corpus.groups) {
        CHECK_FALSE(validate_group(g, lists).has_value());
        CHECK_FALSE(g.has_toxicity());  // scores come from an external scorer
    }
    // Two requests (P1 + P2) per (tuple, target) task.
    CHECK(stub.requests.load() == 6);
}

TEST_CASE("online generation merges deterministically under concurrency") {
    StubServer stub(2);
    const WordLists lists = small_lists();
    GenerationConfig cfg = online_config(stub);
    cfg.concurrency = 4;
    const GenerationOutcome a = generate_groups(lists, cfg, default_pronoun_map());
    const GenerationOutcome b = generate_groups(lists, cfg, default_pronoun_map());
    REQUIRE(a.corpus.groups.size() == b.corpus.groups.size());
    for (size_t i = 0; i < a.corpus.groups.size(); ++i) {
        CHECK(group_to_json(a.corpus.groups[i]) == group_to_json(b.corpus.groups[i]));
    }
}

TEST_CASE("reply cache makes reruns skip the endpoint") {
    StubServer stub(2);
    const WordLists lists = small_lists();
    GenerationConfig cfg = online_config(stub);
    const std::string cache =
        (std::filesystem::temp_directory_path() / "debias_reply_cache.jsonl").string();
    std::remove(cache.c_str());
    cfg.cache_path = cache;

    const GenerationOutcome first = generate_groups(lists, cfg, default_pronoun_map());
    const int after_first = stub.requests.load();
    CHECK(after_first == 6);

    const GenerationOutcome second = generate_groups(lists, cfg, default_pronoun_map());
    CHECK(stub.requests.load() == after_first);  // all cache hits
    REQUIRE(first.corpus.groups.size() == second.corpus.groups.size());
    for (size_t i = 0; i < first.corpus.groups.size(); ++i) {
        CHECK(group_to_json(first.corpus.groups[i]) == group_to_json(second.corpus.groups[i]));
    }
    std::remove(cache.c_str());
}

TEST_CASE("transient failures are retried with backoff") {
    StubServer stub(2);
    stub.failures_to_inject = 2;
    WordLists lists;
    lists.attribute_tuples = {{"he", "she"}};
    lists.targets = {"boss"};
    const GenerationConfig cfg = online_config(stub);
    const GenerationOutcome out = generate_groups(lists, cfg, default_pronoun_map());
    CHECK(out.corpus.groups.size() == 2);
    CHECK(stub.requests.load() == 4);  // 2 failures + 2 successes
}

TEST_CASE("persistent transport failure raises TransportError") {
    StubServer stub(2);
    stub.failures_to_inject = 1000;
    WordLists lists;
    lists.attribute_tuples = {{"he", "she"}};
    lists.targets = {"boss"};
    GenerationConfig cfg = online_config(stub);
    cfg.max_retries = 2;
    CHECK_THROWS_AS(generate_groups(lists, cfg, default_pronoun_map()), TransportError);
}

TEST_CASE("generation config is validated") {
    GenerationConfig cfg;
    cfg.sentences_per_prompt = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.sentences_per_prompt = 1;
    cfg.offline = false;
    cfg.endpoint_url = "";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
