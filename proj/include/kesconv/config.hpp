// SPDX-License-Identifier: Apache-2.0
//
// One flat run configuration. File form is either a flat JSON object or
// key=value lines (blank lines and #-comments ignored); unknown keys are
// rejected either way. Every field has a default, so an empty config is
// valid.

#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kesconv/common.hpp"

namespace kesconv {

struct RunConfig {
    // Decoder backbone.
    int vocab_size = 2000;
    int n_layers = 2;
    int n_heads = 2;
    int hidden_dim = 64;
    int max_positions = 256;
    bool tie_embeddings = true;
    // Unit-gain init for matrices (1/sqrt(hidden_dim)) and large-norm token
    // embeddings: a frozen random decoder needs selective attention and an
    // unsaturated logit ceiling for past-state steering to converge.
    double init_std = 0.125;
    double emb_init_std = 0.5;

    // Prompt encoders.
    int knowledge_prompt_len = 5;
    int context_prompt_len = 10;
    int knowledge_truncate = 64;
    int context_truncate = 128;

    // Retrieval.
    std::string embed_mode = "mean_pooled_frozen";
    std::string embeddings_file;

    // Optimization.
    int batch_size = 8;
    double lr = 5e-5;
    int warmup_steps = 200;
    int total_steps = 1000;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::string mode = "kesconv";

    // Decoding.
    int max_new_tokens = 32;

    int seed = 17;

    // Artifact locations; commands that need one reject an empty value.
    std::string dialogues;
    std::string kb;
    std::string vocab;
    std::string index_dir;
    std::string ckpt_dir;

    int head_dim() const { return hidden_dim / n_heads; }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v <= 0) {
                throw ConfigError(std::string(name) + " must be positive, got " +
                                  std::to_string(v));
            }
        };
        positive(vocab_size, "vocab_size");
        positive(n_layers, "n_layers");
        positive(n_heads, "n_heads");
        positive(hidden_dim, "hidden_dim");
        positive(max_positions, "max_positions");
        positive(knowledge_prompt_len, "knowledge_prompt_len");
        positive(context_prompt_len, "context_prompt_len");
        positive(knowledge_truncate, "knowledge_truncate");
        positive(context_truncate, "context_truncate");
        positive(batch_size, "batch_size");
        positive(total_steps, "total_steps");
        positive(max_new_tokens, "max_new_tokens");
        if (hidden_dim % n_heads != 0) {
            throw ConfigError("hidden_dim (" + std::to_string(hidden_dim) +
                              ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
        }
        if (lr <= 0.0) {
            throw ConfigError("lr must be > 0");
        }
        if (warmup_steps < 0 || warmup_steps >= total_steps) {
            throw ConfigError("warmup_steps must satisfy 0 <= warmup_steps < total_steps");
        }
        if (init_std <= 0.0 || emb_init_std <= 0.0) {
            throw ConfigError("init_std and emb_init_std must be > 0");
        }
        if (clip_norm <= 0.0) {
            throw ConfigError("clip_norm must be > 0");
        }
        if (weight_decay < 0.0) {
            throw ConfigError("weight_decay must be >= 0");
        }
        if (mode != "kesconv" && mode != "concat_baseline" && mode != "no_knowledge") {
            throw ConfigError("mode must be one of kesconv, concat_baseline, no_knowledge; got '" +
                              mode + "'");
        }
        if (embed_mode != "mean_pooled_frozen" && embed_mode != "external_file") {
            throw ConfigError("embed_mode must be mean_pooled_frozen or external_file; got '" +
                              embed_mode + "'");
        }
        if (embed_mode == "external_file" && embeddings_file.empty()) {
            throw ConfigError("embed_mode external_file requires embeddings_file");
        }
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["vocab_size"] = vocab_size;
        j["n_layers"] = n_layers;
        j["n_heads"] = n_heads;
        j["hidden_dim"] = hidden_dim;
        j["max_positions"] = max_positions;
        j["tie_embeddings"] = tie_embeddings;
        j["init_std"] = init_std;
        j["emb_init_std"] = emb_init_std;
        j["knowledge_prompt_len"] = knowledge_prompt_len;
        j["context_prompt_len"] = context_prompt_len;
        j["knowledge_truncate"] = knowledge_truncate;
        j["context_truncate"] = context_truncate;
        j["embed_mode"] = embed_mode;
        j["embeddings_file"] = embeddings_file;
        j["batch_size"] = batch_size;
        j["lr"] = lr;
        j["warmup_steps"] = warmup_steps;
        j["total_steps"] = total_steps;
        j["weight_decay"] = weight_decay;
        j["clip_norm"] = clip_norm;
        j["adam_beta1"] = adam_beta1;
        j["adam_beta2"] = adam_beta2;
        j["adam_eps"] = adam_eps;
        j["mode"] = mode;
        j["max_new_tokens"] = max_new_tokens;
        j["seed"] = seed;
        j["dialogues"] = dialogues;
        j["kb"] = kb;
        j["vocab"] = vocab;
        j["index_dir"] = index_dir;
        j["ckpt_dir"] = ckpt_dir;
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) {
            throw ConfigError("config must be a flat JSON object");
        }
        RunConfig c;
        std::map<std::string, std::function<void(const nlohmann::json&)>> setters;
        auto bind_int = [&](const char* k, int& f) {
            setters[k] = [k, &f](const nlohmann::json& v) {
                if (!v.is_number_integer()) {
                    throw ConfigError(std::string(k) + " must be an integer");
                }
                f = v.get<int>();
            };
        };
        auto bind_real = [&](const char* k, double& f) {
            setters[k] = [k, &f](const nlohmann::json& v) {
                if (!v.is_number()) {
                    throw ConfigError(std::string(k) + " must be a number");
                }
                f = v.get<double>();
            };
        };
        auto bind_bool = [&](const char* k, bool& f) {
            setters[k] = [k, &f](const nlohmann::json& v) {
                if (!v.is_boolean()) {
                    throw ConfigError(std::string(k) + " must be a boolean");
                }
                f = v.get<bool>();
            };
        };
        auto bind_str = [&](const char* k, std::string& f) {
            setters[k] = [k, &f](const nlohmann::json& v) {
                if (!v.is_string()) {
                    throw ConfigError(std::string(k) + " must be a string");
                }
                f = v.get<std::string>();
            };
        };
        bind_int("vocab_size", c.vocab_size);
        bind_int("n_layers", c.n_layers);
        bind_int("n_heads", c.n_heads);
        bind_int("hidden_dim", c.hidden_dim);
        bind_int("max_positions", c.max_positions);
        bind_bool("tie_embeddings", c.tie_embeddings);
        bind_real("init_std", c.init_std);
        bind_real("emb_init_std", c.emb_init_std);
        bind_int("knowledge_prompt_len", c.knowledge_prompt_len);
        bind_int("context_prompt_len", c.context_prompt_len);
        bind_int("knowledge_truncate", c.knowledge_truncate);
        bind_int("context_truncate", c.context_truncate);
        bind_str("embed_mode", c.embed_mode);
        bind_str("embeddings_file", c.embeddings_file);
        bind_int("batch_size", c.batch_size);
        bind_real("lr", c.lr);
        bind_int("warmup_steps", c.warmup_steps);
        bind_int("total_steps", c.total_steps);
        bind_real("weight_decay", c.weight_decay);
        bind_real("clip_norm", c.clip_norm);
        bind_real("adam_beta1", c.adam_beta1);
        bind_real("adam_beta2", c.adam_beta2);
        bind_real("adam_eps", c.adam_eps);
        bind_str("mode", c.mode);
        bind_int("max_new_tokens", c.max_new_tokens);
        bind_int("seed", c.seed);
        bind_str("dialogues", c.dialogues);
        bind_str("kb", c.kb);
        bind_str("vocab", c.vocab);
        bind_str("index_dir", c.index_dir);
        bind_str("ckpt_dir", c.ckpt_dir);

        for (auto it = j.begin(); it != j.end(); ++it) {
            auto s = setters.find(it.key());
            if (s == setters.end()) {
                throw ConfigError("unknown config key '" + it.key() + "'");
            }
            s->second(it.value());
        }
        c.validate();
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) {
            throw ConfigError("cannot open config file " + path);
        }
        std::stringstream buf;
        buf << f.rdbuf();
        const std::string text = buf.str();
        std::size_t first = text.find_first_not_of(" \t\r\n");
        if (first != std::string::npos && text[first] == '{') {
            try {
                return from_json(nlohmann::json::parse(text));
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError("malformed JSON config " + path + ": " + e.what());
            }
        }
        // key=value form; each value parsed as a JSON scalar, bare words as
        // strings.
        nlohmann::json obj = nlohmann::json::object();
        std::istringstream lines(text);
        std::string line;
        int lineno = 0;
        while (std::getline(lines, line)) {
            ++lineno;
            const std::size_t start = line.find_first_not_of(" \t\r");
            if (start == std::string::npos || line[start] == '#') {
                continue;
            }
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(path + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
            }
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                const auto b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            const std::string key = trim(line.substr(0, eq));
            const std::string raw = trim(line.substr(eq + 1));
            if (key.empty()) {
                throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
            }
            nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
            if (v.is_discarded()) {
                v = raw;  // bare string value
            }
            obj[key] = v;
        }
        return from_json(obj);
    }
};

}  // namespace kesconv
