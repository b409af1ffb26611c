// SPDX-License-Identifier: Apache-2.0
//
// Word-level tokenizer and vocabulary.
//
// Tokenization: lowercase the text, emit maximal runs of [a-z0-9] as word
// tokens, emit any other non-whitespace character as a single-character
// token. The five special literals <pad> <unk> <bos> <eos> <sep> are
// recognized verbatim (case-insensitive) and emitted as one token, so a
// detokenized sequence re-tokenizes to itself.
//
// Vocabulary file: one token per line, line number = id. The first five
// lines are reserved for the specials above, ids 0..4. build() orders the
// remaining tokens by descending corpus frequency (ties lexicographic), so
// id order doubles as frequency order: ids 5, 6, ... are the most frequent
// non-special tokens.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "kesconv/common.hpp"

namespace kesconv {

class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;
    static constexpr int kSep = 4;
    static constexpr int kNumSpecials = 5;

    static const std::array<std::string, kNumSpecials>& specials() {
        static const std::array<std::string, kNumSpecials> s = {"<pad>", "<unk>", "<bos>",
                                                                "<eos>", "<sep>"};
        return s;
    }

    Vocab() = default;

    explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        if (tokens_.size() < kNumSpecials) {
            throw DataError("vocabulary must contain at least the 5 reserved tokens");
        }
        for (int i = 0; i < kNumSpecials; ++i) {
            if (tokens_[static_cast<std::size_t>(i)] != specials()[static_cast<std::size_t>(i)]) {
                throw DataError("vocabulary line " + std::to_string(i) + " must be '" +
                                specials()[static_cast<std::size_t>(i)] + "', got '" +
                                tokens_[static_cast<std::size_t>(i)] + "'");
            }
        }
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
                throw DataError("duplicate vocabulary token '" + tokens_[i] + "' at line " +
                                std::to_string(i));
            }
        }
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) {
            throw DataError("token id " + std::to_string(id) + " out of range");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    int id_or_unk(const std::string& tok) const {
        auto it = index_.find(tok);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

    // Surface-form split, no vocab involved. Empty text gives an empty list.
    static std::vector<std::string> split(const std::string& text) {
        std::vector<std::string> out;
        const std::size_t n = text.size();
        std::size_t i = 0;
        while (i < n) {
            const unsigned char c = static_cast<unsigned char>(text[i]);
            if (std::isspace(c)) {
                ++i;
                continue;
            }
            if (c == '<') {
                bool matched = false;
                for (const auto& sp : specials()) {
                    if (i + sp.size() <= n && lowered_equals(text, i, sp)) {
                        out.push_back(sp);
                        i += sp.size();
                        matched = true;
                        break;
                    }
                }
                if (matched) {
                    continue;
                }
            }
            if (is_word_char(c)) {
                std::size_t j = i;
                std::string w;
                while (j < n && is_word_char(static_cast<unsigned char>(text[j]))) {
                    w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[j]))));
                    ++j;
                }
                out.push_back(std::move(w));
                i = j;
            } else {
                out.push_back(std::string(1, static_cast<char>(c)));
                ++i;
            }
        }
        return out;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        for (const auto& w : split(text)) {
            ids.push_back(id_or_unk(w));
        }
        return ids;
    }

    // Tokens joined by single spaces; inverse of encode modulo case, spacing,
    // and UNK loss.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) {
                out.push_back(' ');
            }
            out += token(ids[i]);
        }
        return out;
    }

    // Frequency-ordered vocabulary over a text corpus, capped at max_size
    // entries including the 5 reserved ids.
    static Vocab build(const std::vector<std::string>& texts, int max_size) {
        if (max_size < kNumSpecials + 1) {
            throw ConfigError("vocab size must be at least " + std::to_string(kNumSpecials + 1));
        }
        std::unordered_map<std::string, long long> counts;
        for (const auto& t : texts) {
            for (auto& w : split(t)) {
                bool special = false;
                for (const auto& sp : specials()) {
                    if (w == sp) {
                        special = true;
                        break;
                    }
                }
                if (!special) {
                    ++counts[w];
                }
            }
        }
        std::vector<std::pair<std::string, long long>> ranked(counts.begin(), counts.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) {
                return a.second > b.second;
            }
            return a.first < b.first;
        });
        std::vector<std::string> tokens(specials().begin(), specials().end());
        const std::size_t cap = static_cast<std::size_t>(max_size);
        for (const auto& [tok, cnt] : ranked) {
            if (tokens.size() >= cap) {
                break;
            }
            tokens.push_back(tok);
        }
        return Vocab(std::move(tokens));
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) {
            throw DataError("cannot write vocabulary file " + path);
        }
        for (const auto& t : tokens_) {
            f << t << "\n";
        }
    }

    static Vocab load(const std::string& path) {
        std::ifstream f(path);
        if (!f) {
            throw DataError("cannot open vocabulary file " + path);
        }
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            tokens.push_back(line);
        }
        return Vocab(std::move(tokens));
    }

    // Stable fingerprint used to detect checkpoint/vocabulary mismatches.
    uint64_t fingerprint() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& t : tokens_) {
            h = fnv1a64(t.data(), t.size(), h);
            h = fnv1a64("\n", 1, h);
        }
        return h;
    }

private:
    static bool is_word_char(unsigned char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
    }

    static bool lowered_equals(const std::string& text, std::size_t at, const std::string& lit) {
        for (std::size_t k = 0; k < lit.size(); ++k) {
            if (std::tolower(static_cast<unsigned char>(text[at + k])) != lit[k]) {
                return false;
            }
        }
        return true;
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace kesconv
