// SPDX-License-Identifier: Apache-2.0
#include "debias/llm_gen.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "debias/errors.hpp"
#include "debias/rng.hpp"
#include "debias/text.hpp"

namespace debias {

void GenerationConfig::validate() const {
    if (sentences_per_prompt < 1) {
        throw ConfigError("generation: sentences_per_prompt must be >= 1");
    }
    if (!offline && endpoint_url.empty()) {
        throw ConfigError("generation: endpoint_url required when offline = false");
    }
    if (concurrency < 1) throw ConfigError("generation: concurrency must be >= 1");
}

PromptPair render_prompts(const std::string& a_i, const std::string& a_j,
                          const std::string& target) {
    if (a_i.empty() || a_j.empty() || target.empty()) {
        throw DataError("render_prompts: words must be nonempty");
    }
    if (a_i == a_j) throw DataError("render_prompts: attribute words must differ");
    PromptPair p;
    p.attribute_i = a_i;
    p.attribute_j = a_j;
    p.target = target;
    p.p1 = "Please generate ten sentences containing the words in a tuple (" + a_i + ", " +
           target +
           ") simultaneously. Control the word count in every generated sentence to around 20. "
           "The generated sentences strive for creativity, diversity, and logic.";
    p.p2 = "Replace the term " + a_i + " to " + a_j +
           ", and correct personal pronouns in the above generated ten sentences.";
    return p;
}

namespace {

std::string strip_list_prefix(std::string line) {
    size_t i = 0;
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    size_t j = i;
    while (j < line.size() && std::isdigit(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i && j < line.size() && (line[j] == '.' || line[j] == ')')) {
        i = j + 1;
    } else if (i < line.size() && (line[i] == '-' || line[i] == '*')) {
        ++i;
    }
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    size_t end = line.size();
    while (end > i && (line[end - 1] == ' ' || line[end - 1] == '\t' || line[end - 1] == '\r')) {
        --end;
    }
    return line.substr(i, end - i);
}

}  // namespace

std::vector<std::string> extract_sentences(const std::string& reply_text,
                                           const std::string& required_a,
                                           const std::string& required_b) {
    if (reply_text.empty()) throw DataError("extract_sentences: empty reply");
    std::vector<std::string> out;
    std::istringstream in(reply_text);
    std::string line;
    while (std::getline(in, line)) {
        const std::string s = strip_list_prefix(line);
        if (s.empty()) continue;
        if (contains_word(s, required_a) && contains_word(s, required_b)) out.push_back(s);
    }
    if (out.empty()) {
        throw DataError("extract_sentences: no line contains both '" + required_a + "' and '" +
                        required_b + "'");
    }
    return out;
}

std::vector<std::string> parse_reply(const std::string& reply_text, const PromptPair& expected) {
    return extract_sentences(reply_text, expected.attribute_i, expected.target);
}

// ------------------------------------------------------------ offline mode

namespace {

const std::vector<std::string> kTemplates = {
    "The {attr} worked as a {target} and impressed everyone with {pronoun} skill.",
    "Everyone agreed that the {attr} would make a {adj} {target} someday.",
    "As a {target}, the {attr} solved the problem before the meeting started.",
    "The {attr} spoke with the {adj} {target} about the new project.",
    "Our {target} praised the {attr} for finishing the report early.",
    "When the {attr} became a {target}, the whole town celebrated the news.",
    "The {attr} studied for years to become a {adj} {target} in the city.",
    "A {target} like the {attr} rarely misses a deadline at the office.",
    "The {attr} asked the {target} for advice about the difficult case.",
    "People say the {attr} is the most reliable {target} in the region.",
    "The {attr} trained hard and finally earned the title of {target}.",
    "During the interview, the {attr} explained why the {target} role matters to "
    "{pronoun} team.",
};

const std::vector<std::string> kAdjectives = {"skilled", "busy",    "famous", "young",
                                              "senior",  "careful", "quiet",  "bold"};

std::vector<std::string> template_pool(int d) {
    if (d == 2) return kTemplates;
    std::vector<std::string> pool;
    for (const auto& t : kTemplates) {
        if (t.find("{pronoun}") == std::string::npos) pool.push_back(t);
    }
    return pool;
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
}

std::string pronoun_for_index0(const PronounMap& pronouns) {
    if (pronouns.size() >= 2) return pronouns[1].first;
    if (!pronouns.empty()) return pronouns[0].first;
    return "their";
}

std::string format_group_id(int n) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "g%06d", n);
    return buf;
}

GenerationOutcome generate_offline(const WordLists& lists, const GenerationConfig& cfg,
                                   const PronounMap& pronouns) {
    GenerationOutcome out;
    out.corpus.word_lists = lists;
    const int d = lists.arity();
    const std::vector<std::string> pool = template_pool(d);
    const std::string pronoun = pronoun_for_index0(pronouns);
    Rng tox_rng(derive_seed(cfg.seed, "toxicity"));

    int counter = 0;
    for (const auto& tuple : lists.attribute_tuples) {
        for (const auto& target : lists.targets) {
            for (int n = 0; n < cfg.sentences_per_prompt; ++n) {
                std::string text = pool[n % pool.size()];
                replace_all(text, "{attr}", tuple[0]);
                replace_all(text, "{target}", target);
                replace_all(text, "{pronoun}", pronoun);
                replace_all(text, "{adj}",
                            kAdjectives[(n / pool.size()) % kAdjectives.size()]);

                PairwiseGroup g;
                g.group_id = format_group_id(counter++);
                g.target = target;
                g.variants.push_back({0, tuple[0], text});
                for (int j = 1; j < d; ++j) {
                    g.variants.push_back(
                        {j, tuple[j], counterfactual_swap(text, tuple[0], tuple[j], pronouns)});
                }
                if (cfg.synthetic_toxicity) {
                    for (int j = 0; j < d; ++j) g.toxicity.push_back(tox_rng.uniform());
                }
                if (auto reason = validate_group(g, lists)) {
                    out.dropped.push_back("group " + g.group_id + ": " + *reason);
                    continue;
                }
                out.corpus.groups.push_back(std::move(g));
            }
        }
    }
    return out;
}

// ------------------------------------------------------------- online mode

struct ChatMessage {
    std::string role;
    std::string content;
};

struct UrlParts {
    std::string base;  // scheme://host[:port]
    std::string path;
};

UrlParts split_url(const std::string& url) {
    const size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("generation: endpoint_url must include a scheme: " + url);
    }
    const size_t path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/v1/chat/completions"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

class ChatClient {
  public:
    explicit ChatClient(const GenerationConfig& cfg) : cfg_(cfg), url_(split_url(cfg.endpoint_url)) {
        if (!cfg.api_key_env.empty()) {
            if (const char* key = std::getenv(cfg.api_key_env.c_str())) {
                bearer_ = key;
            }
        }
    }

    std::string complete(const std::vector<ChatMessage>& messages) const {
        nlohmann::ordered_json body;
        body["model"] = cfg_.model_name;
        nlohmann::ordered_json msgs = nlohmann::ordered_json::array();
        for (const auto& m : messages) {
            msgs.push_back({{"role", m.role}, {"content", m.content}});
        }
        body["messages"] = std::move(msgs);
        const std::string payload = body.dump();

        std::string last_failure = "no attempt made";
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0) {
                const double delay = cfg_.backoff_seconds * std::pow(2.0, attempt - 1);
                std::this_thread::sleep_for(std::chrono::duration<double>(delay));
            }
            httplib::Client cli(url_.base);
            const auto timeout = std::chrono::duration<double>(cfg_.timeout_seconds);
            cli.set_connection_timeout(timeout);
            cli.set_read_timeout(timeout);
            cli.set_write_timeout(timeout);
            httplib::Headers headers;
            if (!bearer_.empty()) headers.emplace("Authorization", "Bearer " + bearer_);
            const auto res = cli.Post(url_.path, headers, payload, "application/json");
            if (!res) {
                last_failure = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status != 200) {
                last_failure = "http status " + std::to_string(res->status);
                continue;
            }
            return res->body;
        }
        throw TransportError("chat endpoint " + cfg_.endpoint_url + " failed after " +
                             std::to_string(cfg_.max_retries + 1) + " attempts (" + last_failure +
                             ")");
    }

  private:
    GenerationConfig cfg_;
    UrlParts url_;
    std::string bearer_;
};

std::string reply_content(const std::string& body) {
    const auto j = nlohmann::json::parse(body);  // json::exception on malformed
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
}

// JSONL reply cache keyed by (attribute_i, attribute_j, target); the P1 turn
// is stored with attribute_j == attribute_i.
class ReplyCache {
  public:
    explicit ReplyCache(std::string path) : path_(std::move(path)) {
        if (path_.empty()) return;
        std::ifstream in(path_);
        std::string line;
        while (in && std::getline(in, line)) {
            if (line.empty()) continue;
            try {
                const auto j = nlohmann::json::parse(line);
                entries_[key(j.at("attribute_i"), j.at("attribute_j"), j.at("target"))] =
                    j.at("reply").get<std::string>();
            } catch (const nlohmann::json::exception&) {
                continue;  // ignore damaged cache lines
            }
        }
    }

    std::optional<std::string> get(const std::string& ai, const std::string& aj,
                                   const std::string& target) {
        std::lock_guard<std::mutex> lock(mu_);
        const auto it = entries_.find(key(ai, aj, target));
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    void put(const std::string& ai, const std::string& aj, const std::string& target,
             const std::string& reply) {
        std::lock_guard<std::mutex> lock(mu_);
        entries_[key(ai, aj, target)] = reply;
        if (path_.empty()) return;
        std::ofstream out(path_, std::ios::app);
        nlohmann::ordered_json j;
        j["attribute_i"] = ai;
        j["attribute_j"] = aj;
        j["target"] = target;
        j["reply"] = reply;
        out << j.dump() << "\n";
    }

  private:
    static std::string key(const std::string& ai, const std::string& aj,
                           const std::string& target) {
        return ai + "\x1f" + aj + "\x1f" + target;
    }

    std::string path_;
    std::mutex mu_;
    std::map<std::string, std::string> entries_;
};

struct OnlineTask {
    size_t tuple_index = 0;
    size_t target_index = 0;
    // one sentence list per attribute index; empty when the task failed
    std::vector<std::vector<std::string>> variant_sentences;
    std::vector<std::string> log;
    bool failed = false;
};

void run_online_task(OnlineTask& task, const WordLists& lists, const ChatClient& client,
                     ReplyCache& cache) {
    const auto& tuple = lists.attribute_tuples[task.tuple_index];
    const std::string& target = lists.targets[task.target_index];
    const std::string& a0 = tuple[0];
    const int d = static_cast<int>(tuple.size());
    task.variant_sentences.assign(d, {});

    const auto fetch = [&](const std::string& aj, const std::vector<ChatMessage>& messages) {
        if (auto hit = cache.get(a0, aj, target)) return *hit;
        const std::string content = reply_content(client.complete(messages));
        cache.put(a0, aj, target, content);
        return content;
    };

    const PromptPair base = render_prompts(a0, tuple[1], target);
    std::string p1_reply;
    try {
        p1_reply = fetch(a0, {{"user", base.p1}});
        task.variant_sentences[0] = parse_reply(p1_reply, base);
    } catch (const nlohmann::json::exception& e) {
        task.failed = true;
        task.log.push_back("(" + a0 + ", " + target + "): unparseable reply: " + e.what());
        return;
    } catch (const DataError& e) {
        task.failed = true;
        task.log.push_back("(" + a0 + ", " + target + "): " + e.what());
        return;
    }

    for (int j = 1; j < d; ++j) {
        const PromptPair pj = render_prompts(a0, tuple[j], target);
        try {
            const std::string reply = fetch(
                tuple[j],
                {{"user", pj.p1}, {"assistant", p1_reply}, {"user", pj.p2}});
            task.variant_sentences[j] = extract_sentences(reply, tuple[j], target);
        } catch (const nlohmann::json::exception& e) {
            task.failed = true;
            task.log.push_back("(" + tuple[j] + ", " + target +
                               "): unparseable reply: " + e.what());
            return;
        } catch (const DataError& e) {
            task.failed = true;
            task.log.push_back("(" + tuple[j] + ", " + target + "): " + e.what());
            return;
        }
    }
}

GenerationOutcome generate_online(const WordLists& lists, const GenerationConfig& cfg) {
    GenerationOutcome out;
    out.corpus.word_lists = lists;
    const ChatClient client(cfg);
    ReplyCache cache(cfg.cache_path);

    std::vector<OnlineTask> tasks;
    for (size_t ti = 0; ti < lists.attribute_tuples.size(); ++ti) {
        for (size_t gi = 0; gi < lists.targets.size(); ++gi) {
            OnlineTask t;
            t.tuple_index = ti;
            t.target_index = gi;
            tasks.push_back(std::move(t));
        }
    }

    std::atomic<size_t> next{0};
    std::vector<std::exception_ptr> transport_failures(tasks.size());
    const size_t workers = std::min<size_t>(cfg.concurrency, std::max<size_t>(tasks.size(), 1));
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= tasks.size()) return;
                try {
                    run_online_task(tasks[i], lists, client, cache);
                } catch (...) {
                    transport_failures[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : transport_failures) {
        if (e) std::rethrow_exception(e);
    }

    // Merge deterministically in (tuple, target, line) order.
    int counter = 0;
    for (const auto& task : tasks) {
        for (const auto& msg : task.log) out.dropped.push_back(msg);
        if (task.failed) continue;
        const auto& tuple = lists.attribute_tuples[task.tuple_index];
        const std::string& target = lists.targets[task.target_index];
        size_t lines = static_cast<size_t>(cfg.sentences_per_prompt);
        for (const auto& vs : task.variant_sentences) lines = std::min(lines, vs.size());
        for (size_t n = 0; n < lines; ++n) {
            PairwiseGroup g;
            g.group_id = format_group_id(counter++);
            g.target = target;
            for (size_t j = 0; j < tuple.size(); ++j) {
                g.variants.push_back(
                    {static_cast<int>(j), tuple[j], task.variant_sentences[j][n]});
            }
            if (auto reason = validate_group(g, lists)) {
                out.dropped.push_back("group " + g.group_id + " (" + tuple[0] + ", " + target +
                                      ", line " + std::to_string(n + 1) + "): " + *reason);
                --counter;
                continue;
            }
            out.corpus.groups.push_back(std::move(g));
        }
    }
    return out;
}

}  // namespace

std::string offline_template(int slot, int d) {
    const std::vector<std::string> pool = template_pool(d);
    return pool[slot % pool.size()];
}

GenerationOutcome generate_groups(const WordLists& lists, const GenerationConfig& cfg,
                                  const PronounMap& pronouns) {
    cfg.validate();
    if (lists.arity() < 2) throw DataError("generation: word lists have no attribute tuples");
    return cfg.offline ? generate_offline(lists, cfg, pronouns) : generate_online(lists, cfg);
}

}  // namespace debias
