// SPDX-License-Identifier: Apache-2.0
//
// Frozen-embedding knowledge retrieval: score every KB question against the
// context by inner product, return the top entry (lowest index wins ties).
//
// Two embedding modes. mean_pooled_frozen averages the frozen decoder's
// token-embedding rows over the tokenized text (training-free and fully
// reproducible from config + seed). external_file loads id-keyed vectors
// from JSONL ({"id": ..., "vector": [...]}) for users with a real dense
// retriever; queries are then looked up by dialogue id.
//
// On disk an index is a directory: manifest.json {dim, embed_mode, dtype,
// ids[]} plus embeddings.bin, the vectors concatenated in id order as
// little-endian IEEE-754 doubles. Question/answer text is not duplicated
// into the index; loading takes the KB alongside and validates ids.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "kesconv/common.hpp"
#include "kesconv/corpus.hpp"
#include "kesconv/tensor.hpp"
#include "kesconv/vocab.hpp"

namespace kesconv {

class FrozenEmbedder {
public:
    // Mean-pooled mode over a frozen embedding table [vocab x dim].
    FrozenEmbedder(const Vocab& vocab, Tensor tok_emb)
        : mode_("mean_pooled_frozen"), vocab_(&vocab), tok_emb_(std::move(tok_emb)) {
        if (tok_emb_.rank() != 2 || tok_emb_.dim(0) != vocab.size()) {
            throw ShapeError("embedding table shape " + shape_str(tok_emb_.shape()) +
                             " does not cover vocabulary of " + std::to_string(vocab.size()));
        }
        dim_ = tok_emb_.dim(1);
    }

    // External-vector mode.
    static FrozenEmbedder from_file(const std::string& path) {
        FrozenEmbedder e;
        e.mode_ = "external_file";
        std::ifstream f(path);
        if (!f) {
            throw DataError("cannot open embeddings file " + path);
        }
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) {
                continue;
            }
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object() || !j.contains("id") ||
                !j.contains("vector") || !j["vector"].is_array()) {
                throw DataError(path + ":" + std::to_string(lineno) +
                                ": expected {\"id\": ..., \"vector\": [...]}");
            }
            const std::string id = j["id"].get<std::string>();
            std::vector<double> v = j["vector"].get<std::vector<double>>();
            if (e.dim_ == 0) {
                e.dim_ = static_cast<int>(v.size());
            } else if (static_cast<int>(v.size()) != e.dim_) {
                throw DataError(path + ":" + std::to_string(lineno) + ": vector of dim " +
                                std::to_string(v.size()) + ", expected " + std::to_string(e.dim_));
            }
            e.external_[id] = std::move(v);
        }
        if (e.external_.empty()) {
            throw DataError("embeddings file " + path + " contains no vectors");
        }
        return e;
    }

    const std::string& mode() const { return mode_; }
    int dim() const { return dim_; }

    // Mean of the embedding rows of the tokenized text; empty text gives the
    // zero vector.
    std::vector<double> embed_text(const std::string& text) const {
        if (mode_ != "mean_pooled_frozen") {
            throw ConfigError("embed_text requires mean_pooled_frozen mode");
        }
        std::vector<double> out(static_cast<std::size_t>(dim_), 0.0);
        const std::vector<int> ids = vocab_->encode(text);
        if (ids.empty()) {
            return out;
        }
        const double* table = tok_emb_.data().data();
        for (int id : ids) {
            const double* row = table + static_cast<std::size_t>(id) * dim_;
            for (int j = 0; j < dim_; ++j) {
                out[static_cast<std::size_t>(j)] += row[j];
            }
        }
        const double inv = 1.0 / static_cast<double>(ids.size());
        for (auto& v : out) {
            v *= inv;
        }
        return out;
    }

    std::vector<double> embed_id(const std::string& id) const {
        if (mode_ != "external_file") {
            throw ConfigError("embed_id requires external_file mode");
        }
        auto it = external_.find(id);
        if (it == external_.end()) {
            throw DataError("no external embedding for id '" + id + "'");
        }
        return it->second;
    }

    std::vector<double> embed_entry(const QAEntry& e) const {
        return mode_ == "external_file" ? embed_id(e.id) : embed_text(e.question);
    }

    std::vector<double> embed_query(const DialogueContext& ctx) const {
        return mode_ == "external_file" ? embed_id(ctx.dialogue_id)
                                        : embed_text(ctx.query_text());
    }

private:
    FrozenEmbedder() = default;

    std::string mode_;
    const Vocab* vocab_ = nullptr;
    Tensor tok_emb_;
    int dim_ = 0;
    std::unordered_map<std::string, std::vector<double>> external_;
};

struct Top1 {
    int index = -1;
    double score = 0.0;
};

class KnowledgeIndex {
public:
    static KnowledgeIndex build(std::vector<QAEntry> kb, const FrozenEmbedder& emb) {
        if (kb.empty()) {
            throw DataError("cannot build an index from an empty knowledge base");
        }
        {
            std::unordered_set<std::string> seen;
            std::string dups;
            for (const auto& e : kb) {
                if (!seen.insert(e.id).second) {
                    dups += (dups.empty() ? "" : ", ") + e.id;
                }
            }
            if (!dups.empty()) {
                throw DataError("duplicate knowledge base ids: " + dups);
            }
        }
        KnowledgeIndex idx;
        idx.embed_mode_ = emb.mode();
        idx.dim_ = emb.dim();
        idx.entries_ = std::move(kb);
        idx.embeddings_.reserve(idx.entries_.size());
        for (const auto& e : idx.entries_) {
            idx.embeddings_.push_back(emb.embed_entry(e));
        }
        return idx;
    }

    int size() const { return static_cast<int>(entries_.size()); }
    int dim() const { return dim_; }
    const std::string& embed_mode() const { return embed_mode_; }
    const QAEntry& entry(int i) const { return entries_.at(static_cast<std::size_t>(i)); }
    const std::vector<double>& embedding(int i) const {
        return embeddings_.at(static_cast<std::size_t>(i));
    }

    // Exhaustive inner-product scan; strict > keeps the lowest index on ties.
    Top1 top1(const std::vector<double>& query) const {
        if (entries_.empty()) {
            throw DataError("top1 on an empty index");
        }
        if (static_cast<int>(query.size()) != dim_) {
            throw ShapeError("query dim " + std::to_string(query.size()) + ", index dim " +
                             std::to_string(dim_));
        }
        Top1 best;
        for (int i = 0; i < size(); ++i) {
            const auto& e = embeddings_[static_cast<std::size_t>(i)];
            double s = 0.0;
            for (int j = 0; j < dim_; ++j) {
                s += query[static_cast<std::size_t>(j)] * e[static_cast<std::size_t>(j)];
            }
            if (best.index < 0 || s > best.score) {
                best.index = i;
                best.score = s;
            }
        }
        return best;
    }

    Top1 top1(const FrozenEmbedder& emb, const DialogueContext& ctx) const {
        return top1(emb.embed_query(ctx));
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::ordered_json m;
        m["dim"] = dim_;
        m["embed_mode"] = embed_mode_;
        m["dtype"] = "f64";
        m["ids"] = nlohmann::json::array();
        for (const auto& e : entries_) {
            m["ids"].push_back(e.id);
        }
        {
            std::ofstream mf(dir / "manifest.json");
            if (!mf) {
                throw DataError("cannot write " + (dir / "manifest.json").string());
            }
            mf << m.dump(2) << "\n";
        }
        std::ofstream bf(dir / "embeddings.bin", std::ios::binary);
        if (!bf) {
            throw DataError("cannot write " + (dir / "embeddings.bin").string());
        }
        for (const auto& v : embeddings_) {
            bf.write(reinterpret_cast<const char*>(v.data()),
                     static_cast<std::streamsize>(v.size() * sizeof(double)));
        }
    }

    // The index stores no text, so the KB must accompany it; ids must match
    // one-to-one in order.
    static KnowledgeIndex load(const std::filesystem::path& dir, std::vector<QAEntry> kb) {
        nlohmann::json m;
        {
            std::ifstream mf(dir / "manifest.json");
            if (!mf) {
                throw DataError("cannot open " + (dir / "manifest.json").string());
            }
            try {
                mf >> m;
            } catch (const nlohmann::json::exception& e) {
                throw DataError("malformed index manifest: " + std::string(e.what()));
            }
        }
        KnowledgeIndex idx;
        idx.dim_ = m.at("dim").get<int>();
        idx.embed_mode_ = m.at("embed_mode").get<std::string>();
        if (m.contains("dtype") && m["dtype"].get<std::string>() != "f64") {
            throw DataError("index dtype '" + m["dtype"].get<std::string>() + "' not supported");
        }
        const auto ids = m.at("ids").get<std::vector<std::string>>();
        if (ids.size() != kb.size()) {
            throw DataError("index has " + std::to_string(ids.size()) + " entries, kb has " +
                            std::to_string(kb.size()));
        }
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] != kb[i].id) {
                throw DataError("index entry " + std::to_string(i) + " id '" + ids[i] +
                                "' does not match kb id '" + kb[i].id + "'");
            }
        }
        idx.entries_ = std::move(kb);
        std::ifstream bf(dir / "embeddings.bin", std::ios::binary);
        if (!bf) {
            throw DataError("cannot open " + (dir / "embeddings.bin").string());
        }
        bf.seekg(0, std::ios::end);
        const auto bytes = static_cast<std::size_t>(bf.tellg());
        bf.seekg(0, std::ios::beg);
        const std::size_t want = ids.size() * static_cast<std::size_t>(idx.dim_) * sizeof(double);
        if (bytes != want) {
            throw DataError("embeddings.bin is " + std::to_string(bytes) + " bytes, expected " +
                            std::to_string(want));
        }
        idx.embeddings_.assign(ids.size(), std::vector<double>(static_cast<std::size_t>(idx.dim_)));
        for (auto& v : idx.embeddings_) {
            bf.read(reinterpret_cast<char*>(v.data()),
                    static_cast<std::streamsize>(v.size() * sizeof(double)));
        }
        if (!bf) {
            throw DataError("short read from " + (dir / "embeddings.bin").string());
        }
        return idx;
    }

private:
    std::string embed_mode_;
    int dim_ = 0;
    std::vector<QAEntry> entries_;
    std::vector<std::vector<double>> embeddings_;
};

}  // namespace kesconv
