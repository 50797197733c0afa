// SPDX-License-Identifier: Apache-2.0
#include "debias/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "debias/alignment.hpp"
#include "debias/errors.hpp"
#include "debias/rng.hpp"

namespace debias {

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("config: '" + key + "' expects a boolean, got '" + v + "'");
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
    }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    if (v.empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, item));
    return out;
}

std::string trim(const std::string& s) {
    const size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename Fn>
void run_stage(const char* name, Fn&& fn) {
    const auto wrap = [&](const auto& e) { return std::string("stage ") + name + ": " + e.what(); };
    try {
        fn();
    } catch (const ConfigError& e) {
        throw ConfigError(wrap(e));
    } catch (const DataError& e) {
        throw DataError(wrap(e));
    } catch (const NumericError& e) {
        throw NumericError(wrap(e));
    } catch (const TransportError& e) {
        throw TransportError(wrap(e));
    }
}

PronounMap pronouns_for(const PipelineConfig& cfg) {
    return cfg.pronouns.empty() ? default_pronoun_map() : load_pronoun_map(cfg.pronouns);
}

Corpus load_corpus_artifact(const PipelineConfig& cfg, const std::string& name) {
    const WordLists lists = parse_word_lists(cfg.word_lists);
    IngestResult result = ingest_groups(cfg.artifact(name), lists);
    if (!result.rejects.empty()) {
        throw DataError("artifact " + name + " contains " +
                        std::to_string(result.rejects.size()) +
                        " invalid groups (first: " + result.rejects[0].reason + ")");
    }
    return std::move(result.corpus);
}

std::vector<std::string> variant_texts(const Corpus& corpus) {
    std::vector<std::string> out;
    for (const auto& g : corpus.groups) {
        for (const auto& v : g.variants) out.push_back(v.text);
    }
    return out;
}

std::vector<std::string> template_sentences(const WordLists& lists) {
    std::vector<std::string> out;
    for (const auto& t : lists.targets) out.push_back(target_template(t));
    return out;
}

double mean_d_over_kept(const EncoderModel& model, const Corpus& corpus,
                        const AlignmentReport& report, double temperature) {
    const std::vector<std::string> kept = report.kept_ids();
    if (kept.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& id : kept) {
        const PairwiseGroup* g = corpus.find(id);
        if (g == nullptr) throw DataError("mean D: group '" + id + "' missing from corpus");
        sum += bias_measure(model, *g, corpus.word_lists, temperature);
    }
    return sum / static_cast<double>(kept.size());
}

}  // namespace

void PipelineConfig::set(const std::string& key, const std::string& value) {
    if (key == "seed") {
        seed = parse_u64(key, value);
    } else if (key == "output_dir") {
        output_dir = value;
    } else if (key == "word_lists") {
        word_lists = value;
    } else if (key == "corpus") {
        corpus = value;
    } else if (key == "pronouns") {
        pronouns = value;
    } else if (key == "max_groups") {
        max_groups = parse_int(key, value);
    } else if (key == "heldout_fraction") {
        heldout_fraction = parse_double(key, value);
    } else if (key == "gen.enabled") {
        gen_enabled = parse_bool(key, value);
    } else if (key == "gen.offline") {
        gen.offline = parse_bool(key, value);
    } else if (key == "gen.endpoint_url") {
        gen.endpoint_url = value;
    } else if (key == "gen.model_name") {
        gen.model_name = value;
    } else if (key == "gen.sentences_per_prompt") {
        gen.sentences_per_prompt = parse_int(key, value);
    } else if (key == "gen.timeout_seconds") {
        gen.timeout_seconds = parse_double(key, value);
    } else if (key == "gen.api_key_env") {
        gen.api_key_env = value;
    } else if (key == "gen.max_retries") {
        gen.max_retries = parse_int(key, value);
    } else if (key == "gen.backoff_seconds") {
        gen.backoff_seconds = parse_double(key, value);
    } else if (key == "gen.concurrency") {
        gen.concurrency = parse_int(key, value);
    } else if (key == "gen.cache") {
        gen.cache_path = value;
    } else if (key == "gen.synthetic_toxicity") {
        gen.synthetic_toxicity = parse_bool(key, value);
    } else if (key == "tox.enabled") {
        tox_enabled = parse_bool(key, value);
    } else if (key == "tox.keep_fraction") {
        tox_keep_fraction = parse_double(key, value);
    } else if (key == "tox.scores") {
        tox_scores = value;
    } else if (key == "encoder.d_model") {
        encoder.d_model = parse_int(key, value);
    } else if (key == "encoder.layers") {
        encoder.layers = parse_int(key, value);
    } else if (key == "encoder.heads") {
        encoder.heads = parse_int(key, value);
    } else if (key == "encoder.max_len") {
        encoder.max_len = parse_int(key, value);
    } else if (key == "pretrain.epochs") {
        pretrain.epochs = parse_int(key, value);
    } else if (key == "pretrain.learning_rate") {
        pretrain.learning_rate = parse_double(key, value);
    } else if (key == "pretrain.mask_prob") {
        pretrain.mask_prob = parse_double(key, value);
    } else if (key == "pretrain.batch_size") {
        pretrain.batch_size = parse_int(key, value);
    } else if (key == "align.k") {
        align_k = parse_int(key, value);
    } else if (key == "align.keep_fraction") {
        align_keep_fraction = parse_double(key, value);
    } else if (key == "align.temperature") {
        align_temperature = parse_double(key, value);
    } else if (key == "align.temperature_s") {
        align_temperature_s = parse_double(key, value);
    } else if (key == "align.random_neighbors") {
        random_neighbors = parse_bool(key, value);
    } else if (key == "train.epochs") {
        train_epochs = parse_int(key, value);
    } else if (key == "train.learning_rate") {
        train_learning_rate = parse_double(key, value);
    } else if (key == "train.lambda") {
        train_lambda = parse_double(key, value);
    } else if (key == "train.batch_size") {
        train_batch_size = parse_int(key, value);
    } else if (key == "metrics.seat") {
        metrics_seat = value;
    } else if (key == "metrics.stereoset") {
        metrics_stereoset = value;
    } else if (key == "metrics.crows") {
        metrics_crows = value;
    } else if (key == "metrics.projection") {
        metrics_projection = parse_bool(key, value);
    } else if (key == "sweep.sizes") {
        sweep_sizes = parse_int_list(key, value);
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

PipelineConfig PipelineConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    PipelineConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config " + path + ":" + std::to_string(line_no) +
                              ": expected key = value");
        }
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

// ------------------------------------------------------------------ stages

void stage_generate(const PipelineConfig& cfg) {
    const WordLists lists = parse_word_lists(cfg.word_lists);
    GenerationConfig gen = cfg.gen;
    gen.seed = derive_seed(cfg.seed, "generate");
    const GenerationOutcome outcome = generate_groups(lists, gen, pronouns_for(cfg));
    write_corpus_jsonl(outcome.corpus, cfg.artifact("corpus_raw.jsonl"));
    std::ofstream log(cfg.artifact("generation_log.txt"));
    for (const auto& d : outcome.dropped) log << d << "\n";
}

void stage_ingest(const PipelineConfig& cfg) {
    const WordLists lists = parse_word_lists(cfg.word_lists);
    const std::string in_path = cfg.gen_enabled ? cfg.artifact("corpus_raw.jsonl") : cfg.corpus;
    if (in_path.empty()) {
        throw ConfigError("ingest: set 'corpus' when generation is disabled");
    }
    IngestResult result = ingest_groups(in_path, lists);
    write_validation_report(result.rejects, cfg.artifact("validation_report.jsonl"));
    if (cfg.max_groups > 0 &&
        result.corpus.groups.size() > static_cast<size_t>(cfg.max_groups)) {
        result.corpus.groups.resize(static_cast<size_t>(cfg.max_groups));
    }
    if (result.corpus.groups.empty()) throw DataError("ingest: no valid groups in " + in_path);
    write_corpus_jsonl(result.corpus, cfg.artifact("corpus_valid.jsonl"));
}

void stage_tox_filter(const PipelineConfig& cfg) {
    Corpus corpus = load_corpus_artifact(cfg, "corpus_valid.jsonl");
    if (!cfg.tox_scores.empty()) {
        std::ifstream in(cfg.tox_scores);
        if (!in) throw DataError("cannot open toxicity scores: " + cfg.tox_scores);
        std::string line;
        std::map<std::string, std::vector<double>> scores;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            scores[j.at("group_id").get<std::string>()] =
                j.at("toxicity").get<std::vector<double>>();
        }
        for (auto& g : corpus.groups) {
            const auto it = scores.find(g.group_id);
            if (it != scores.end()) g.toxicity = it->second;
        }
    }
    const Corpus filtered =
        cfg.tox_enabled ? toxicity_filter(corpus, cfg.tox_keep_fraction) : corpus;
    write_corpus_jsonl(filtered, cfg.artifact("corpus_filtered.jsonl"));
}

void stage_pretrain(const PipelineConfig& cfg) {
    const Corpus corpus = load_corpus_artifact(cfg, "corpus_filtered.jsonl");

    // Held-out groups are excluded from every training phase and only used
    // for the perplexity proxy.
    std::vector<size_t> order(corpus.groups.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, "heldout"));
    rng.shuffle(order);
    const size_t n_held =
        static_cast<size_t>(cfg.heldout_fraction * static_cast<double>(order.size()));
    Corpus heldout;
    heldout.word_lists = corpus.word_lists;
    Corpus train_corpus;
    train_corpus.word_lists = corpus.word_lists;
    std::vector<bool> held(order.size(), false);
    for (size_t i = 0; i < n_held; ++i) held[order[i]] = true;
    for (size_t i = 0; i < corpus.groups.size(); ++i) {
        (held[i] ? heldout : train_corpus).groups.push_back(corpus.groups[i]);
    }
    if (train_corpus.groups.empty()) throw DataError("pretrain: no training groups after split");
    write_corpus_jsonl(train_corpus, cfg.artifact("corpus_train.jsonl"));
    write_corpus_jsonl(heldout, cfg.artifact("heldout.jsonl"));

    std::vector<std::string> vocab_sentences = variant_texts(corpus);
    const std::vector<std::string> templates = template_sentences(corpus.word_lists);
    vocab_sentences.insert(vocab_sentences.end(), templates.begin(), templates.end());

    EncoderConfig enc = cfg.encoder;
    enc.seed = derive_seed(cfg.seed, "encoder-init");
    EncoderModel model = EncoderModel::init(enc, WordTokenizer::build(vocab_sentences));

    std::vector<std::string> train_sentences = variant_texts(train_corpus);
    train_sentences.insert(train_sentences.end(), templates.begin(), templates.end());
    PretrainConfig pre = cfg.pretrain;
    pre.seed = derive_seed(cfg.seed, "pretrain");
    const std::vector<double> losses = pretrain_mlm(model, train_sentences, pre);

    save_checkpoint(model, cfg.artifact("model_pretrained.ckpt"));
    std::ofstream log(cfg.artifact("pretrain_log.csv"));
    log << "epoch,mlm_loss\n";
    log.precision(17);
    for (size_t i = 0; i < losses.size(); ++i) log << (i + 1) << "," << losses[i] << "\n";
}

void stage_align(const PipelineConfig& cfg) {
    const Corpus corpus = load_corpus_artifact(cfg, "corpus_train.jsonl");
    const EncoderModel frozen = load_checkpoint(cfg.artifact("model_pretrained.ckpt"));

    NeighborhoodMap hoods;
    if (cfg.random_neighbors) {
        std::vector<std::string> ids;
        for (const auto& g : corpus.groups) ids.push_back(g.group_id);
        hoods = random_neighborhoods(ids, cfg.align_k, derive_seed(cfg.seed, "v2-neighbors"));
    } else {
        hoods = build_knn(group_embeddings(frozen, corpus), cfg.align_k, cfg.align_temperature_s);
    }
    AlignmentReport report =
        causal_effect(frozen, corpus, hoods, corpus.word_lists, cfg.align_temperature);
    select_aligned(report, cfg.align_keep_fraction);
    report.k = cfg.align_k;
    save_alignment_report(report, cfg.artifact("alignment.json"));
}

void stage_debias(const PipelineConfig& cfg) {
    const Corpus corpus = load_corpus_artifact(cfg, "corpus_train.jsonl");
    const Corpus heldout = load_corpus_artifact(cfg, "heldout.jsonl");
    const EncoderModel frozen = load_checkpoint(cfg.artifact("model_pretrained.ckpt"));
    EncoderModel model = frozen;

    const AlignmentReport report = load_alignment_report(cfg.artifact("alignment.json"));
    const NeighborhoodMap hoods = neighborhoods_from_report(report);

    TrainConfig train_cfg;
    train_cfg.epochs = cfg.train_epochs;
    train_cfg.learning_rate = cfg.train_learning_rate;
    train_cfg.lambda = cfg.train_lambda;
    train_cfg.batch_size = cfg.train_batch_size;
    train_cfg.knn_k = cfg.align_k;
    train_cfg.keep_fraction_align = cfg.align_keep_fraction;
    train_cfg.temperature = cfg.align_temperature;
    train_cfg.temperature_s = cfg.align_temperature_s;
    train_cfg.random_neighbors = cfg.random_neighbors;
    train_cfg.seed = derive_seed(cfg.seed, "train");

    const TrainLog log = train(model, frozen, corpus, report.kept_ids(), hoods, train_cfg,
                               variant_texts(heldout));
    save_checkpoint(model, cfg.artifact("model_debiased.ckpt"));
    write_train_log_csv(log, cfg.artifact("train_log.csv"));
    write_train_log_json(log, cfg.artifact("train_log.json"));
}

void stage_eval(const PipelineConfig& cfg, const std::string& checkpoint_name,
                const std::string& tag) {
    const EncoderModel model = load_checkpoint(cfg.artifact(checkpoint_name));
    const Corpus corpus = load_corpus_artifact(cfg, "corpus_train.jsonl");
    const Corpus heldout = load_corpus_artifact(cfg, "heldout.jsonl");
    const AlignmentReport alignment = load_alignment_report(cfg.artifact("alignment.json"));

    BiasReport report;
    if (!cfg.metrics_seat.empty()) {
        report.seat = seat_effect_size(model, load_seat_spec(cfg.metrics_seat));
    }
    if (!cfg.metrics_stereoset.empty()) {
        const StereoScores s = stereoset_scores(model, load_stereoset(cfg.metrics_stereoset));
        report.lm = s.lm;
        report.ss = s.ss;
        report.icat = s.icat;
    }
    if (!cfg.metrics_crows.empty()) {
        report.crows = crows_score(model, load_crows(cfg.metrics_crows));
    }
    report.mean_d = mean_d_over_kept(model, corpus, alignment, cfg.align_temperature);
    const std::vector<std::string> heldout_sentences = variant_texts(heldout);
    if (!heldout_sentences.empty()) {
        report.pseudo_perplexity = pseudo_perplexity(model, heldout_sentences);
    }
    save_bias_report(report, cfg.artifact("metrics_" + tag + ".json"));
    if (cfg.metrics_projection) {
        write_projection_csv(project_words(model, corpus.word_lists),
                             cfg.artifact("projection_" + tag + ".csv"));
    }
}

namespace {

void write_summary(const PipelineConfig& cfg, const BiasReport& before, const BiasReport& after) {
    std::ofstream out(cfg.artifact("summary.txt"));
    if (!out) throw DataError("cannot write summary");
    out << std::fixed << std::setprecision(4);
    out << std::setw(20) << "metric" << std::setw(14) << "before" << std::setw(14) << "after"
        << "\n";
    const auto row = [&](const char* name, double b, double a) {
        out << std::setw(20) << name << std::setw(14) << b << std::setw(14) << a << "\n";
    };
    row("seat", before.seat, after.seat);
    row("lm", before.lm, after.lm);
    row("ss", before.ss, after.ss);
    row("icat", before.icat, after.icat);
    row("crows", before.crows, after.crows);
    row("mean_d", before.mean_d, after.mean_d);
    row("pseudo_perplexity", before.pseudo_perplexity, after.pseudo_perplexity);
}

void write_curves(const PipelineConfig& cfg, const nlohmann::json& manifest) {
    const std::vector<int> sizes = manifest.at("sizes").get<std::vector<int>>();
    const std::vector<std::string> dirs = manifest.at("dirs").get<std::vector<std::string>>();
    std::vector<BiasReport> reports;
    for (const auto& dir : dirs) reports.push_back(load_bias_report(dir + "/metrics_after.json"));

    std::ofstream csv(cfg.artifact("curves.csv"));
    csv << "groups,seat,lm,ss,icat,crows,mean_d,pseudo_perplexity\n";
    csv.precision(17);
    for (size_t i = 0; i < sizes.size(); ++i) {
        const BiasReport& r = reports[i];
        csv << sizes[i] << "," << r.seat << "," << r.lm << "," << r.ss << "," << r.icat << ","
            << r.crows << "," << r.mean_d << "," << r.pseudo_perplexity << "\n";
    }

    // One polyline per metric, each normalized to its own [min, max].
    const int w = 640;
    const int h = 360;
    const int margin = 40;
    const std::vector<std::pair<std::string, std::vector<double>>> series = {
        {"seat", {}}, {"lm", {}}, {"ss", {}}, {"icat", {}}, {"crows", {}}, {"mean_d", {}},
        {"pseudo_perplexity", {}}};
    std::vector<std::pair<std::string, std::vector<double>>> filled = series;
    for (const BiasReport& r : reports) {
        filled[0].second.push_back(r.seat);
        filled[1].second.push_back(r.lm);
        filled[2].second.push_back(r.ss);
        filled[3].second.push_back(r.icat);
        filled[4].second.push_back(r.crows);
        filled[5].second.push_back(r.mean_d);
        filled[6].second.push_back(r.pseudo_perplexity);
    }
    const std::vector<std::string> colors = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e",
                                             "#9467bd", "#8c564b", "#17becf"};
    std::ofstream svg(cfg.artifact("curves.svg"));
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (size_t s = 0; s < filled.size(); ++s) {
        const auto& vals = filled[s].second;
        if (vals.size() < 2) continue;
        double lo = vals[0];
        double hi = vals[0];
        for (const double v : vals) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double span = (hi - lo) < 1e-12 ? 1.0 : hi - lo;
        svg << "<polyline fill=\"none\" stroke=\"" << colors[s % colors.size()]
            << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < vals.size(); ++i) {
            const double x =
                margin + (w - 2.0 * margin) * static_cast<double>(i) /
                             static_cast<double>(vals.size() - 1);
            const double y = h - margin - (h - 2.0 * margin) * (vals[i] - lo) / span;
            svg << x << "," << y << " ";
        }
        svg << "\"/>\n";
        svg << "<text x=\"" << (w - margin + 4) << "\" y=\""
            << (margin + 16 * static_cast<int>(s)) << "\" font-size=\"10\" fill=\""
            << colors[s % colors.size()] << "\">" << filled[s].first << "</text>\n";
    }
    svg << "</svg>\n";
}

}  // namespace

void stage_report(const PipelineConfig& cfg) {
    const BiasReport before = load_bias_report(cfg.artifact("metrics_before.json"));
    const BiasReport after = load_bias_report(cfg.artifact("metrics_after.json"));
    nlohmann::ordered_json j;
    j["before"] = bias_report_to_json(before);
    j["after"] = bias_report_to_json(after);
    std::ofstream out(cfg.artifact("report.json"));
    if (!out) throw DataError("cannot write report.json");
    out << j.dump(2) << "\n";
    write_bias_report_csv(before, after, cfg.artifact("report.csv"));
    write_summary(cfg, before, after);

    const std::string manifest_path = cfg.artifact("sweep_manifest.json");
    if (std::filesystem::exists(manifest_path)) {
        std::ifstream min(manifest_path);
        nlohmann::json manifest;
        min >> manifest;
        write_curves(cfg, manifest);
    }
}

void stage_sweep(const PipelineConfig& cfg) {
    if (cfg.sweep_sizes.empty()) throw ConfigError("sweep: set sweep.sizes");
    nlohmann::ordered_json manifest;
    std::vector<int> sizes;
    std::vector<std::string> dirs;
    for (const int size : cfg.sweep_sizes) {
        PipelineConfig sub = cfg;
        sub.output_dir = cfg.artifact("sweep_" + std::to_string(size));
        sub.max_groups = size;
        sub.sweep_sizes.clear();
        run_pipeline(sub);
        sizes.push_back(size);
        dirs.push_back(sub.output_dir);
    }
    manifest["sizes"] = sizes;
    manifest["dirs"] = dirs;
    std::ofstream out(cfg.artifact("sweep_manifest.json"));
    if (!out) throw DataError("cannot write sweep manifest");
    out << manifest.dump(2) << "\n";
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    if (cfg.gen_enabled) run_stage("generate", [&] { stage_generate(cfg); });
    run_stage("ingest", [&] { stage_ingest(cfg); });
    run_stage("tox-filter", [&] { stage_tox_filter(cfg); });
    run_stage("pretrain", [&] { stage_pretrain(cfg); });
    run_stage("align", [&] { stage_align(cfg); });
    run_stage("eval", [&] { stage_eval(cfg, "model_pretrained.ckpt", "before"); });
    run_stage("debias", [&] { stage_debias(cfg); });
    run_stage("eval", [&] { stage_eval(cfg, "model_debiased.ckpt", "after"); });
    run_stage("report", [&] { stage_report(cfg); });
    PipelineResult result;
    result.before = load_bias_report(cfg.artifact("metrics_before.json"));
    result.after = load_bias_report(cfg.artifact("metrics_after.json"));
    return result;
}

}  // namespace debias
