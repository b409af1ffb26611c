// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the CLI verbs. Each function is
// deterministic given its inputs, config, and seed, and every artifact it
// writes can be re-derived from the ones before it:
//
//   synth        -> dialogues.jsonl, kb.jsonl
//   build-vocab  -> vocab.txt (frequency-ordered)
//   index        -> index_dir/{manifest.json, embeddings.bin}
//   train        -> ckpt_dir/{manifest.json, params.bin, run_manifest.json,
//                   loss_trace.csv}
//   generate     -> generations.jsonl
//   evaluate     -> metrics JSON (+ table on stdout)
//   sweep        -> per-value runs + report.csv + report.json

#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "kesconv/common.hpp"
#include "kesconv/config.hpp"
#include "kesconv/corpus.hpp"
#include "kesconv/metrics.hpp"
#include "kesconv/retriever.hpp"
#include "kesconv/system.hpp"
#include "kesconv/trainer.hpp"
#include "kesconv/vocab.hpp"

namespace kesconv {

namespace detail {

inline void require_path(const std::string& value, const char* key) {
    if (value.empty()) {
        throw ConfigError(std::string("config key '") + key + "' is required for this command");
    }
}

inline FrozenEmbedder make_embedder(const RunConfig& cfg, const Vocab& vocab,
                                    const KesconvSystem& sys) {
    if (cfg.embed_mode == "external_file") {
        return FrozenEmbedder::from_file(cfg.embeddings_file);
    }
    return FrozenEmbedder(vocab, sys.store().get("rgd.tok_emb"));
}

// Fills each example's knowledge slot with its top-1 retrieval (the frozen
// retriever makes this a one-time precompute).
inline void attach_retrieval(std::vector<TrainExample>& examples, const KnowledgeIndex& index,
                             const FrozenEmbedder& emb) {
    for (auto& ex : examples) {
        const Top1 hit = index.top1(emb, ex.context);
        ex.knowledge = index.entry(hit.index);
        ex.retrieval_score = hit.score;
    }
}

}  // namespace detail

inline void cmd_synth(uint64_t seed, int n_dialogues, int kb_size,
                      const std::string& dialogues_out, const std::string& kb_out) {
    synth_corpus(seed, n_dialogues, kb_size, dialogues_out, kb_out);
}

// Vocabulary over every dialogue turn plus every KB question and answer.
inline void cmd_build_vocab(const RunConfig& cfg, const std::string& out_path) {
    detail::require_path(cfg.dialogues, "dialogues");
    detail::require_path(cfg.kb, "kb");
    std::vector<std::string> texts;
    for (const auto& d : load_dialogues(cfg.dialogues)) {
        for (const auto& t : d.turns) {
            texts.push_back(t.text);
        }
    }
    for (const auto& e : load_kb(cfg.kb)) {
        texts.push_back(e.question);
        texts.push_back(e.answer);
    }
    Vocab::build(texts, cfg.vocab_size).save(out_path);
}

inline void cmd_index(const RunConfig& cfg) {
    detail::require_path(cfg.kb, "kb");
    detail::require_path(cfg.vocab, "vocab");
    detail::require_path(cfg.index_dir, "index_dir");
    const Vocab vocab = Vocab::load(cfg.vocab);
    KesconvSystem sys(cfg, vocab);
    const FrozenEmbedder emb = detail::make_embedder(cfg, vocab, sys);
    KnowledgeIndex::build(load_kb(cfg.kb), emb).save(cfg.index_dir);
}

inline void write_run_manifest(const RunConfig& cfg, const Vocab& vocab,
                               const std::filesystem::path& ckpt_dir) {
    nlohmann::ordered_json m;
    m["version"] = kVersionString;
    m["seed"] = cfg.seed;
    m["vocab_fingerprint"] = to_hex(vocab.fingerprint());
    m["config"] = cfg.to_json();
    std::ofstream f(ckpt_dir / "run_manifest.json");
    if (!f) {
        throw DataError("cannot write " + (ckpt_dir / "run_manifest.json").string());
    }
    f << m.dump(2) << "\n";
}

inline TrainResult cmd_train(const RunConfig& cfg) {
    detail::require_path(cfg.dialogues, "dialogues");
    detail::require_path(cfg.kb, "kb");
    detail::require_path(cfg.vocab, "vocab");
    detail::require_path(cfg.index_dir, "index_dir");
    detail::require_path(cfg.ckpt_dir, "ckpt_dir");

    const Vocab vocab = Vocab::load(cfg.vocab);
    KesconvSystem sys(cfg, vocab);
    const FrozenEmbedder emb = detail::make_embedder(cfg, vocab, sys);
    const KnowledgeIndex index = KnowledgeIndex::load(cfg.index_dir, load_kb(cfg.kb));

    std::vector<TrainExample> examples = extract_examples(load_dialogues(cfg.dialogues), vocab);
    detail::attach_retrieval(examples, index, emb);

    std::filesystem::create_directories(cfg.ckpt_dir);
    TrainResult result = train(sys, vocab, examples,
                               (std::filesystem::path(cfg.ckpt_dir) / "loss_trace.csv").string());
    sys.save(cfg.ckpt_dir);
    write_run_manifest(cfg, vocab, cfg.ckpt_dir);
    return result;
}

struct GenerationRow {
    std::string dialogue_id;
    std::string retrieved_id;
    double retrieval_score = 0.0;
    std::string response_text;
};

// Checks the checkpoint was trained against this exact vocabulary.
inline void check_vocab_match(const std::filesystem::path& ckpt_dir, const Vocab& vocab) {
    std::ifstream f(ckpt_dir / "run_manifest.json");
    if (!f) {
        throw DataError("checkpoint has no run manifest: " +
                        (ckpt_dir / "run_manifest.json").string());
    }
    nlohmann::json m;
    try {
        f >> m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed run manifest: " + std::string(e.what()));
    }
    const std::string want = m.value("vocab_fingerprint", "");
    const std::string got = to_hex(vocab.fingerprint());
    if (want != got) {
        throw DataError("vocabulary mismatch: checkpoint was trained with fingerprint " + want +
                        ", supplied vocabulary has " + got);
    }
}

inline std::vector<GenerationRow> cmd_generate(const RunConfig& cfg, const std::string& out_path,
                                               std::ostream& log = std::cerr) {
    detail::require_path(cfg.dialogues, "dialogues");
    detail::require_path(cfg.kb, "kb");
    detail::require_path(cfg.vocab, "vocab");
    detail::require_path(cfg.index_dir, "index_dir");
    detail::require_path(cfg.ckpt_dir, "ckpt_dir");

    const Vocab vocab = Vocab::load(cfg.vocab);
    check_vocab_match(cfg.ckpt_dir, vocab);
    KesconvSystem sys(cfg, vocab);
    sys.load(cfg.ckpt_dir);
    const FrozenEmbedder emb = detail::make_embedder(cfg, vocab, sys);
    const KnowledgeIndex index = KnowledgeIndex::load(cfg.index_dir, load_kb(cfg.kb));

    NoGradGuard ng;
    std::vector<GenerationRow> rows;
    std::ofstream out(out_path);
    if (!out) {
        throw DataError("cannot write " + out_path);
    }
    for (const auto& d : load_dialogues(cfg.dialogues)) {
        const GenerationPair gp = last_supporter_split(d);
        if (!gp.ok) {
            log << "warning: dialogue '" << d.id
                << "' has no supporter turn with preceding context; skipped\n";
            continue;
        }
        const Top1 hit = index.top1(emb, gp.context);
        const QAEntry& entry = index.entry(hit.index);

        const std::vector<int> context_ids = sys.encode_context(gp.context, vocab);
        const std::vector<int> knowledge_ids =
            cfg.mode == "no_knowledge" ? std::vector<int>{}
                                       : sys.encode_knowledge(entry, vocab);
        const std::vector<int> seed = sys.decode_seed(knowledge_ids, context_ids);

        std::vector<int> generated;
        if (sys.baseline()) {
            generated = sys.rgd().greedy_decode(seed, PastState{}, cfg.max_new_tokens,
                                                Vocab::kEos);
        } else {
            const PastState past = sys.build_past(knowledge_ids, context_ids);
            generated = sys.rgd().greedy_decode(seed, past, cfg.max_new_tokens, Vocab::kEos);
        }
        if (!generated.empty() && generated.back() == Vocab::kEos) {
            generated.pop_back();
        }

        GenerationRow row;
        row.dialogue_id = d.id;
        row.retrieved_id = entry.id;
        row.retrieval_score = hit.score;
        row.response_text = vocab.decode(generated);
        nlohmann::ordered_json j;
        j["dialogue_id"] = row.dialogue_id;
        j["retrieved_id"] = row.retrieved_id;
        j["retrieval_score"] = row.retrieval_score;
        j["response_text"] = row.response_text;
        out << j.dump() << "\n";
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        throw DataError("no dialogue produced a generation (all skipped)");
    }
    return rows;
}

inline std::vector<GenerationRow> load_generations(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot open generations file " + path);
    }
    std::vector<GenerationRow> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json j = detail::parse_jsonl_line(line, path, lineno);
        GenerationRow r;
        r.dialogue_id = detail::require_string(j, "dialogue_id", path, lineno);
        r.retrieved_id = detail::require_string(j, "retrieved_id", path, lineno);
        if (!j.contains("retrieval_score") || !j["retrieval_score"].is_number()) {
            throw DataError(path + ":" + std::to_string(lineno) +
                            ": missing numeric field 'retrieval_score'");
        }
        r.retrieval_score = j["retrieval_score"].get<double>();
        r.response_text = detail::require_string(j, "response_text", path, lineno);
        rows.push_back(std::move(r));
    }
    if (rows.empty()) {
        throw DataError("generations file " + path + " contains no rows");
    }
    return rows;
}

// Scores generated responses against each dialogue's final supporter turn.
inline MetricsReport cmd_evaluate(const RunConfig& cfg, const std::string& generations_path,
                                  const std::string& out_path) {
    detail::require_path(cfg.dialogues, "dialogues");
    detail::require_path(cfg.kb, "kb");
    detail::require_path(cfg.vocab, "vocab");

    const Vocab vocab = Vocab::load(cfg.vocab);
    KesconvSystem sys(cfg, vocab);  // frozen embeddings for knowledge_affinity

    std::unordered_map<std::string, std::string> references;
    for (const auto& d : load_dialogues(cfg.dialogues)) {
        const GenerationPair gp = last_supporter_split(d);
        if (gp.ok) {
            references[d.id] = gp.reference;
        }
    }
    std::unordered_map<std::string, std::string> answers;
    for (const auto& e : load_kb(cfg.kb)) {
        answers[e.id] = e.answer;
    }

    std::vector<std::vector<int>> cands, refs, knows;
    for (const auto& row : load_generations(generations_path)) {
        auto rit = references.find(row.dialogue_id);
        if (rit == references.end()) {
            throw DataError("generation references dialogue '" + row.dialogue_id +
                            "' which has no reference turn in " + cfg.dialogues);
        }
        auto ait = answers.find(row.retrieved_id);
        if (ait == answers.end()) {
            throw DataError("generation references kb id '" + row.retrieved_id +
                            "' which is not in " + cfg.kb);
        }
        cands.push_back(vocab.encode(row.response_text));
        refs.push_back(vocab.encode(rit->second));
        knows.push_back(vocab.encode(ait->second));
    }

    const MetricsReport rep =
        evaluate_responses(cands, refs, knows, sys.store().get("rgd.tok_emb"));
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        if (!f) {
            throw DataError("cannot write " + out_path);
        }
        f << rep.to_json().dump(2) << "\n";
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string axis;
    int value = 0;
    bool ok = false;
    std::string error;
    MetricsReport metrics;
};

struct SweepReport {
    std::vector<SweepRow> rows;

    std::string to_csv() const {
        std::ostringstream os;
        os << "axis,value,status,bleu1,bleu2,dist1,dist2,dist3,rouge_l,knowledge_affinity\n";
        os << std::setprecision(10);
        for (const auto& r : rows) {
            os << r.axis << "," << r.value << "," << (r.ok ? "ok" : "failed");
            if (r.ok) {
                os << "," << r.metrics.bleu1 << "," << r.metrics.bleu2 << "," << r.metrics.dist1
                   << "," << r.metrics.dist2 << "," << r.metrics.dist3 << "," << r.metrics.rouge_l
                   << "," << r.metrics.knowledge_affinity;
            } else {
                os << ",,,,,,,";
            }
            os << "\n";
        }
        return os.str();
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& r : rows) {
            nlohmann::ordered_json j;
            j["axis"] = r.axis;
            j["value"] = r.value;
            j["status"] = r.ok ? "ok" : "failed";
            if (r.ok) {
                j["metrics"] = r.metrics.to_json();
            } else {
                j["error"] = r.error;
            }
            arr.push_back(std::move(j));
        }
        return arr;
    }
};

// Splits the dialogues 80/20 (in file order), trains one run per value with
// the other prompt size held at the config value, generates on the held-out
// fifth, and evaluates. A failed run is recorded and the sweep continues.
inline SweepReport cmd_sweep(const RunConfig& base_cfg, const std::string& axis,
                             const std::vector<int>& values, const std::string& out_dir,
                             std::ostream& log = std::cerr) {
    if (axis != "knowledge" && axis != "context") {
        throw ConfigError("sweep axis must be 'knowledge' or 'context', got '" + axis + "'");
    }
    if (values.empty()) {
        throw ConfigError("sweep needs at least one value");
    }
    detail::require_path(base_cfg.dialogues, "dialogues");
    detail::require_path(base_cfg.kb, "kb");
    detail::require_path(base_cfg.vocab, "vocab");

    const std::filesystem::path root(out_dir);
    std::filesystem::create_directories(root);

    // Split once so every run sees the same train/eval partition.
    const std::vector<Dialogue> all = load_dialogues(base_cfg.dialogues);
    const std::size_t n_train = std::max<std::size_t>(1, all.size() * 8 / 10);
    auto write_subset = [&](const std::filesystem::path& path, std::size_t from, std::size_t to) {
        std::ofstream f(path);
        if (!f) {
            throw DataError("cannot write " + path.string());
        }
        std::ifstream src(base_cfg.dialogues);
        std::string line;
        std::size_t kept = 0, idx = 0;
        while (std::getline(src, line)) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) {
                continue;
            }
            if (idx >= from && idx < to) {
                f << line << "\n";
                ++kept;
            }
            ++idx;
        }
        if (kept == 0) {
            throw DataError("empty dialogue split " + path.string());
        }
    };
    const auto train_path = root / "train_dialogues.jsonl";
    const auto eval_path = root / "eval_dialogues.jsonl";
    write_subset(train_path, 0, n_train);
    write_subset(eval_path, n_train, all.size());

    SweepReport report;
    for (int v : values) {
        SweepRow row;
        row.axis = axis;
        row.value = v;
        const std::filesystem::path run_dir = root / ("run_" + axis + "_" + std::to_string(v));
        try {
            std::filesystem::create_directories(run_dir);
            RunConfig cfg = base_cfg;
            if (axis == "knowledge") {
                cfg.knowledge_prompt_len = v;
            } else {
                cfg.context_prompt_len = v;
            }
            cfg.validate();
            cfg.dialogues = train_path.string();
            cfg.index_dir = (run_dir / "index").string();
            cfg.ckpt_dir = (run_dir / "ckpt").string();
            cmd_index(cfg);
            cmd_train(cfg);

            RunConfig gen_cfg = cfg;
            gen_cfg.dialogues = eval_path.string();
            const auto gen_path = run_dir / "generations.jsonl";
            cmd_generate(gen_cfg, gen_path.string(), log);
            row.metrics = cmd_evaluate(gen_cfg, gen_path.string(),
                                       (run_dir / "metrics.json").string());
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
            log << "sweep run " << axis << "=" << v << " failed: " << e.what() << "\n";
        }
        report.rows.push_back(std::move(row));
    }

    {
        std::ofstream f(root / "report.csv");
        if (!f) {
            throw DataError("cannot write " + (root / "report.csv").string());
        }
        f << report.to_csv();
    }
    {
        std::ofstream f(root / "report.json");
        if (!f) {
            throw DataError("cannot write " + (root / "report.json").string());
        }
        f << report.to_json().dump(2) << "\n";
    }
    return report;
}

}  // namespace kesconv
