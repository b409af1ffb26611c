// SPDX-License-Identifier: Apache-2.0
//
// Dialogue and knowledge-base records, JSONL ingestion, training-example
// extraction, and the deterministic synthetic corpus generator.
//
// File formats, one JSON object per line:
//   dialogues  {"id": str, "turns": [{"speaker": "seeker"|"supporter",
//               "text": str}, ...]}
//   kb         {"id": str, "question": str, "answer": str}

#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kesconv/common.hpp"
#include "kesconv/vocab.hpp"

namespace kesconv {

struct Turn {
    std::string speaker;  // "seeker" or "supporter"
    std::string text;
};

struct Dialogue {
    std::string id;
    std::vector<Turn> turns;
};

// The utterances preceding a response, oldest first.
struct DialogueContext {
    std::string dialogue_id;
    std::vector<std::string> utterances;

    bool empty() const { return utterances.empty(); }

    // Retrieval query text: every utterance, joined by the SEP surface form,
    // most recent last.
    std::string query_text() const {
        std::string out;
        for (std::size_t i = 0; i < utterances.size(); ++i) {
            if (i) {
                out += " " + Vocab::specials()[Vocab::kSep] + " ";
            }
            out += utterances[i];
        }
        return out;
    }
};

struct QAEntry {
    std::string id;
    std::string question;
    std::string answer;
};

struct TrainExample {
    DialogueContext context;
    QAEntry knowledge;          // filled by retrieval precompute
    double retrieval_score = 0.0;
    std::vector<int> response;  // gold ids, EOS-terminated
};

// ---------------------------------------------------------------------------
// JSONL ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json parse_jsonl_line(const std::string& line, const std::string& path,
                                       int lineno) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed JSON record");
    }
    return j;
}

inline std::string require_string(const nlohmann::json& j, const char* key,
                                  const std::string& path, int lineno) {
    if (!j.contains(key) || !j[key].is_string()) {
        throw DataError(path + ":" + std::to_string(lineno) + ": missing string field '" + key +
                        "'");
    }
    return j[key].get<std::string>();
}

}  // namespace detail

inline std::vector<Dialogue> load_dialogues(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot open dialogues file " + path);
    }
    std::vector<Dialogue> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json j = detail::parse_jsonl_line(line, path, lineno);
        Dialogue d;
        d.id = detail::require_string(j, "id", path, lineno);
        if (!j.contains("turns") || !j["turns"].is_array() || j["turns"].empty()) {
            throw DataError(path + ":" + std::to_string(lineno) +
                            ": 'turns' must be a nonempty array");
        }
        for (const auto& tj : j["turns"]) {
            if (!tj.is_object()) {
                throw DataError(path + ":" + std::to_string(lineno) + ": turn must be an object");
            }
            Turn t;
            t.speaker = detail::require_string(tj, "speaker", path, lineno);
            t.text = detail::require_string(tj, "text", path, lineno);
            if (t.speaker != "seeker" && t.speaker != "supporter") {
                throw DataError(path + ":" + std::to_string(lineno) + ": speaker must be " +
                                "'seeker' or 'supporter', got '" + t.speaker + "'");
            }
            d.turns.push_back(std::move(t));
        }
        out.push_back(std::move(d));
    }
    if (out.empty()) {
        throw DataError("dialogues file " + path + " contains no records");
    }
    return out;
}

inline std::vector<QAEntry> load_kb(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot open knowledge base file " + path);
    }
    std::vector<QAEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json j = detail::parse_jsonl_line(line, path, lineno);
        QAEntry e;
        e.id = detail::require_string(j, "id", path, lineno);
        e.question = detail::require_string(j, "question", path, lineno);
        e.answer = detail::require_string(j, "answer", path, lineno);
        if (e.answer.empty()) {
            throw DataError(path + ":" + std::to_string(lineno) + ": empty answer");
        }
        out.push_back(std::move(e));
    }
    if (out.empty()) {
        throw DataError("knowledge base file " + path + " contains no records");
    }
    return out;
}

// Every supporter turn with at least one preceding turn becomes one example:
// context = all prior turns, response = that turn (EOS-terminated ids).
// Knowledge is left empty here; retrieval fills it in.
inline std::vector<TrainExample> extract_examples(const std::vector<Dialogue>& dialogues,
                                                  const Vocab& vocab) {
    std::vector<TrainExample> out;
    for (const auto& d : dialogues) {
        for (std::size_t t = 0; t < d.turns.size(); ++t) {
            if (d.turns[t].speaker != "supporter" || t == 0) {
                continue;
            }
            TrainExample ex;
            ex.context.dialogue_id = d.id;
            for (std::size_t u = 0; u < t; ++u) {
                ex.context.utterances.push_back(d.turns[u].text);
            }
            ex.response = vocab.encode(d.turns[t].text);
            ex.response.push_back(Vocab::kEos);
            out.push_back(std::move(ex));
        }
    }
    if (out.empty()) {
        throw DataError("no usable training examples: no supporter turn has a preceding turn");
    }
    return out;
}

// For generation: the final supporter turn becomes the reference, everything
// before it the context. Dialogues without such a turn (or where it opens the
// dialogue) yield an empty optional-like result signalled by ok = false.
struct GenerationPair {
    bool ok = false;
    DialogueContext context;
    std::string reference;
};

inline GenerationPair last_supporter_split(const Dialogue& d) {
    GenerationPair gp;
    int last = -1;
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
        if (d.turns[t].speaker == "supporter") {
            last = static_cast<int>(t);
        }
    }
    if (last <= 0) {
        return gp;
    }
    gp.ok = true;
    gp.context.dialogue_id = d.id;
    for (int u = 0; u < last; ++u) {
        gp.context.utterances.push_back(d.turns[static_cast<std::size_t>(u)].text);
    }
    gp.reference = d.turns[static_cast<std::size_t>(last)].text;
    return gp;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------
//
// Deterministic templated emotional-support corpus. Every KB entry owns a
// unique topic word that appears in its question and in no other question, so
// retrieval ground truth is recoverable from the ids (both carry the topic).
// Answers carry three topic-specific advice words that also show up in
// supporter responses, which is what makes retrieved knowledge predictive of
// the response. Length targets: supporter responses mean ~16 tokens, KB
// questions ~114, KB answers ~36.

namespace synth {

inline const std::vector<std::string>& topic_lexicon() {
    static const std::vector<std::string> v = {
        "anxiety",   "sleep",     "exams",     "breakup",   "job",       "family",
        "money",     "health",    "stress",    "loneliness", "grief",    "anger",
        "friends",   "school",    "moving",    "divorce",   "illness",   "bullying",
        "workload",  "future",    "failure",   "guilt",     "panic",     "crowds",
        "darkness",  "deadlines", "conflict",  "marriage",  "parenting", "retirement",
        "debt",      "housing",   "neighbors", "commuting", "diet",      "fitness",
        "addiction", "gaming",    "phone",     "media",     "college",   "thesis",
        "interview", "promotion", "layoff",    "relocation", "visa",     "language",
        "culture",   "homesick",  "insomnia",  "nightmares", "fatigue",  "burnout",
        "focus",     "memory",    "confidence", "shyness",  "stage",     "speaking",
        "heights",   "flying",    "spiders",   "storms"};
    return v;
}

inline const std::vector<std::string>& advice_lexicon() {
    static const std::vector<std::string> v = {
        "breathing",   "journaling",  "walking",     "meditation",  "stretching",
        "reading",     "gardening",   "swimming",    "cycling",     "yoga",
        "painting",    "music",       "baking",      "hiking",      "volunteering",
        "therapy",     "counseling",  "routines",    "naps",        "sunlight",
        "hydration",   "planning",    "lists",       "breaks",      "boundaries",
        "gratitude",   "affirmations", "decluttering", "budgeting", "saving",
        "mentoring",   "tutoring",    "practice",    "rehearsal",   "visualization",
        "grounding",   "pacing",      "delegating",  "prioritizing", "unplugging"};
    return v;
}

inline std::string topic_word(int i) {
    const auto& lex = topic_lexicon();
    if (i < static_cast<int>(lex.size())) {
        return lex[static_cast<std::size_t>(i)];
    }
    return "topic" + std::to_string(i);
}

inline std::vector<std::string> advice_words(int topic_idx) {
    const auto& lex = advice_lexicon();
    const int n = static_cast<int>(lex.size());
    std::vector<std::string> out;
    for (int k = 0; k < 3; ++k) {
        out.push_back(lex[static_cast<std::size_t>((3 * topic_idx + k) % n)]);
    }
    return out;
}

// Clause templates; "T" expands to the topic word, "A0".."A2" to advice
// words. Token counts (by the project tokenizer) are what the length
// calibration below relies on.

inline std::string expand(const std::string& tpl, const std::string& topic,
                          const std::vector<std::string>& advice) {
    std::string out;
    std::istringstream ss(tpl);
    std::string w;
    bool first = true;
    while (ss >> w) {
        std::string rep = w;
        if (w == "T") {
            rep = topic;
        } else if (w == "A0") {
            rep = advice[0];
        } else if (w == "A1") {
            rep = advice[1];
        } else if (w == "A2") {
            rep = advice[2];
        }
        if (!first) {
            out += " ";
        }
        out += rep;
        first = false;
    }
    return out;
}

inline const std::vector<std::string>& seeker_clauses() {
    static const std::vector<std::string> v = {
        "i feel so worried about my T lately",
        "T keeps me up late at night",
        "i cannot stop thinking about T",
        "every day the T gets worse for me",
        "what should i do about all this T",
        "my T is really hard to handle right now",
        "the T makes everything about T feel heavy",
        "T and more T is all i think about",
        "it feels like the T will never end",
        "honestly the T has taken over my whole week"};
    return v;
}

inline const std::vector<std::string>& question_clauses() {
    static const std::vector<std::string> v = {
        "how can someone cope with T when it builds up",
        "what helps most with T during a long stretch",
        "is it normal for T to affect daily life this much",
        "my T has been growing and i wonder what works",
        "people say T passes but mine stays around",
        "which habits make T easier to live with",
        "does talking about T actually reduce the T itself",
        "i have read that T responds well to routine",
        "when T peaks what is the first thing to try",
        "can small changes really move the needle on T",
        "friends with T told me different things about T",
        "what do experts usually suggest for ongoing T"};
    return v;
}

inline const std::vector<std::string>& answer_clauses() {
    static const std::vector<std::string> v = {
        "many people find A0 eases T over time",
        "start with A1 a few minutes each day",
        "A2 also helps when T feels overwhelming",
        "pairing A0 with A1 works well for T",
        "be patient since T fades with steady practice",
        "keep a simple plan and let A2 anchor it"};
    return v;
}

inline const std::vector<std::string>& response_templates() {
    static const std::vector<std::string> v = {
        "maybe try A0 , i think A1 could really help you with T over time",
        "have you tried A0 yet , many people find A1 very helpful for easing T",
        "i hear you , A0 and a little A1 often soften T quite a lot",
        "that sounds hard , perhaps A0 could help , and A1 works for T too",
        "you are not alone , try A0 first and then add some gentle A1 later",
        "small steps like A0 or A1 can make T feel a bit lighter over time",
        "many people with T say A0 helps , maybe A1 could be worth a try",
        "it makes sense to feel this way , A0 and A1 often ease T a lot"};
    return v;
}

// Every question uses all twelve clauses exactly once, in a rotated order.
// Mean pooling is order-invariant, so all questions share one template word
// profile and one length; inner-product ranking then hinges on the topic
// word alone, which keeps synthetic retrieval ground truth clean.
inline std::string make_question(int topic_idx, Rng& rng) {
    const std::string t = topic_word(topic_idx);
    const auto adv = advice_words(topic_idx);
    const auto& clauses = question_clauses();
    const std::size_t n = clauses.size();
    const std::size_t rot = static_cast<std::size_t>(rng.randint(n));
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) {
            out += i % 2 == 0 ? " . " : " , ";
        }
        out += expand(clauses[(rot + i) % n], t, adv);
    }
    return out;
}

inline std::string make_answer(int topic_idx, Rng& rng) {
    const std::string t = topic_word(topic_idx);
    const auto adv = advice_words(topic_idx);
    const auto& clauses = answer_clauses();
    // First three clauses guarantee all advice words appear; one more for
    // length. ~36 tokens.
    std::vector<std::size_t> order = {0, 1, 2};
    std::string out;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i) {
            out += " , ";
        }
        out += expand(clauses[order[i]], t, adv);
    }
    out += " . " + expand(clauses[3 + rng.randint(3)], t, adv);
    return out;
}

inline std::string make_seeker_turn(int topic_idx, Rng& rng) {
    const std::string t = topic_word(topic_idx);
    const auto adv = advice_words(topic_idx);
    const auto& clauses = seeker_clauses();
    std::string out;
    const int n = 2 + static_cast<int>(rng.randint(2));
    for (int i = 0; i < n; ++i) {
        if (i) {
            out += " , ";
        }
        out += expand(clauses[rng.randint(clauses.size())], t, adv);
    }
    return out;
}

inline std::string make_response(int topic_idx, Rng& rng) {
    const auto adv = advice_words(topic_idx);
    const auto& tpls = response_templates();
    return expand(tpls[rng.randint(tpls.size())], topic_word(topic_idx), adv);
}

}  // namespace synth

// Deterministic synthetic corpus. The KB is drawn from seed-derived streams
// keyed only by entry index, so it is identical for any n_dialogues.
inline void synth_corpus(uint64_t seed, int n_dialogues, int kb_size,
                         const std::string& dialogues_path, const std::string& kb_path) {
    if (n_dialogues < 1 || kb_size < 1) {
        throw ConfigError("synth_corpus: sizes must be >= 1");
    }
    Rng base(seed);
    {
        std::ofstream f(kb_path);
        if (!f) {
            throw DataError("cannot write " + kb_path);
        }
        for (int i = 0; i < kb_size; ++i) {
            Rng r = base.stream(0x4b000000ull + static_cast<uint64_t>(i));
            nlohmann::ordered_json j;
            j["id"] = "kb-" + std::to_string(i) + "-" + synth::topic_word(i);
            j["question"] = synth::make_question(i, r);
            j["answer"] = synth::make_answer(i, r);
            f << j.dump() << "\n";
        }
    }
    {
        std::ofstream f(dialogues_path);
        if (!f) {
            throw DataError("cannot write " + dialogues_path);
        }
        for (int d = 0; d < n_dialogues; ++d) {
            Rng r = base.stream(0xd1000000ull + static_cast<uint64_t>(d));
            const int topic = static_cast<int>(r.randint(static_cast<uint64_t>(kb_size)));
            nlohmann::ordered_json turns = nlohmann::ordered_json::array();
            const int rounds = 1 + static_cast<int>(r.randint(2));  // 1 or 2 seeker/supporter pairs
            for (int t = 0; t < rounds; ++t) {
                turns.push_back({{"speaker", "seeker"}, {"text", synth::make_seeker_turn(topic, r)}});
                turns.push_back({{"speaker", "supporter"}, {"text", synth::make_response(topic, r)}});
            }
            nlohmann::ordered_json j;
            j["id"] = "dlg-" + std::to_string(d) + "-" + synth::topic_word(topic);
            j["turns"] = turns;
            f << j.dump() << "\n";
        }
    }
}

}  // namespace kesconv
