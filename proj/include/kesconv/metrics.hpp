// SPDX-License-Identifier: Apache-2.0
//
// Generation metrics: sentence BLEU-1/2 (corpus value = mean over pairs),
// corpus-level DIST-1/2/3, ROUGE-L F1, and knowledge_affinity.
//
// knowledge_affinity is NOT BERTScore. It is the cosine similarity of
// mean-pooled frozen token embeddings of response and knowledge, mapped to
// [0, 1] as (1 + cos) / 2; degenerate zero vectors score 0.5. It stands in
// for a learned semantic-overlap score at desk scale and is labeled by its
// own name everywhere.
//
// BLEU smoothing: any k-gram precision with zero matches (or no k-grams at
// all) is replaced by 1 / (2 * |candidate|); without this BLEU-2 collapses
// to 0 on short outputs. Brevity penalty: min(1, exp(1 - |ref| / |cand|)).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "kesconv/common.hpp"
#include "kesconv/tensor.hpp"

namespace kesconv {

namespace detail {

// Byte-packed n-gram key for hashing.
inline std::string ngram_key(const std::vector<int>& ids, std::size_t at, int n) {
    std::string key(static_cast<std::size_t>(n) * sizeof(int), '\0');
    std::memcpy(key.data(), ids.data() + at, static_cast<std::size_t>(n) * sizeof(int));
    return key;
}

inline std::unordered_map<std::string, int> ngram_counts(const std::vector<int>& ids, int n) {
    std::unordered_map<std::string, int> counts;
    if (static_cast<int>(ids.size()) >= n) {
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= ids.size(); ++i) {
            ++counts[ngram_key(ids, i, n)];
        }
    }
    return counts;
}

}  // namespace detail

inline double bleu_n(const std::vector<int>& candidate, const std::vector<int>& reference,
                     int n) {
    if (n < 1 || n > 2) {
        throw ConfigError("bleu_n supports n = 1 or 2, got " + std::to_string(n));
    }
    if (candidate.empty()) {
        return 0.0;
    }
    const double clen = static_cast<double>(candidate.size());
    double log_prec_sum = 0.0;
    for (int k = 1; k <= n; ++k) {
        const auto cand_counts = detail::ngram_counts(candidate, k);
        const auto ref_counts = detail::ngram_counts(reference, k);
        long long matches = 0;
        long long total = 0;
        for (const auto& [gram, c] : cand_counts) {
            total += c;
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) {
                matches += std::min(c, it->second);
            }
        }
        const double pk = (total > 0 && matches > 0)
                              ? static_cast<double>(matches) / static_cast<double>(total)
                              : 1.0 / (2.0 * clen);
        log_prec_sum += std::log(pk);
    }
    const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(reference.size()) / clen));
    return bp * std::exp(log_prec_sum / static_cast<double>(n));
}

// Distinct n-grams over the whole corpus divided by total n-grams.
inline double dist_n(const std::vector<std::vector<int>>& responses, int n) {
    if (n < 1 || n > 3) {
        throw ConfigError("dist_n supports n in 1..3, got " + std::to_string(n));
    }
    std::unordered_set<std::string> distinct;
    long long total = 0;
    for (const auto& r : responses) {
        if (static_cast<int>(r.size()) < n) {
            continue;
        }
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= r.size(); ++i) {
            distinct.insert(detail::ngram_key(r, i, n));
            ++total;
        }
    }
    if (total == 0) {
        return 0.0;
    }
    return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

inline double rouge_l(const std::vector<int>& candidate, const std::vector<int>& reference) {
    if (candidate.empty() || reference.empty()) {
        return 0.0;
    }
    const std::size_t m = candidate.size();
    const std::size_t r = reference.size();
    std::vector<int> prev(r + 1, 0);
    std::vector<int> cur(r + 1, 0);
    for (std::size_t i = 1; i <= m; ++i) {
        for (std::size_t j = 1; j <= r; ++j) {
            cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1
                                                          : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    const int lcs = prev[r];
    if (lcs == 0) {
        return 0.0;
    }
    const double p = static_cast<double>(lcs) / static_cast<double>(m);
    const double rec = static_cast<double>(lcs) / static_cast<double>(r);
    return 2.0 * p * rec / (p + rec);
}

// (1 + cos) / 2 of the mean-pooled embedding rows; 0.5 when either pooled
// vector is zero.
inline double knowledge_affinity(const std::vector<int>& response,
                                 const std::vector<int>& knowledge, const Tensor& emb_table) {
    if (emb_table.rank() != 2) {
        throw ShapeError("knowledge_affinity: embedding table must be rank-2");
    }
    const int v = emb_table.dim(0);
    const int h = emb_table.dim(1);
    auto pool = [&](const std::vector<int>& ids) {
        std::vector<double> out(static_cast<std::size_t>(h), 0.0);
        for (int id : ids) {
            if (id < 0 || id >= v) {
                throw DataError("knowledge_affinity: token id " + std::to_string(id) +
                                " out of range");
            }
            const double* row = emb_table.data().data() + static_cast<std::size_t>(id) * h;
            for (int j = 0; j < h; ++j) {
                out[static_cast<std::size_t>(j)] += row[j];
            }
        }
        if (!ids.empty()) {
            for (auto& x : out) {
                x /= static_cast<double>(ids.size());
            }
        }
        return out;
    };
    const std::vector<double> a = pool(response);
    const std::vector<double> b = pool(knowledge);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int j = 0; j < h; ++j) {
        dot += a[static_cast<std::size_t>(j)] * b[static_cast<std::size_t>(j)];
        na += a[static_cast<std::size_t>(j)] * a[static_cast<std::size_t>(j)];
        nb += b[static_cast<std::size_t>(j)] * b[static_cast<std::size_t>(j)];
    }
    if (na == 0.0 || nb == 0.0) {
        return 0.5;
    }
    const double cosv = dot / (std::sqrt(na) * std::sqrt(nb));
    return 0.5 * (1.0 + cosv);
}

struct MetricsReport {
    double bleu1 = 0.0;
    double bleu2 = 0.0;
    double dist1 = 0.0;
    double dist2 = 0.0;
    double dist3 = 0.0;
    double rouge_l = 0.0;
    double knowledge_affinity = 0.0;
    int n_examples = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["bleu1"] = bleu1;
        j["bleu2"] = bleu2;
        j["dist1"] = dist1;
        j["dist2"] = dist2;
        j["dist3"] = dist3;
        j["rouge_l"] = rouge_l;
        j["knowledge_affinity"] = knowledge_affinity;
        j["n_examples"] = n_examples;
        return j;
    }

    std::string to_table() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(4);
        auto row = [&os](const char* name, double v) {
            os << std::left << std::setw(20) << name << std::right << std::setw(8) << v << "\n";
        };
        os << std::left << std::setw(20) << "metric" << std::right << std::setw(8) << "value"
           << "\n";
        os << std::string(28, '-') << "\n";
        row("bleu1", bleu1);
        row("bleu2", bleu2);
        row("dist1", dist1);
        row("dist2", dist2);
        row("dist3", dist3);
        row("rouge_l", rouge_l);
        row("knowledge_affinity", knowledge_affinity);
        os << std::left << std::setw(20) << "n_examples" << std::right << std::setw(8)
           << n_examples << "\n";
        return os.str();
    }
};

// Corpus aggregation: BLEU/ROUGE/affinity are per-pair means, DIST is
// corpus-level over the candidates.
inline MetricsReport evaluate_responses(const std::vector<std::vector<int>>& candidates,
                                        const std::vector<std::vector<int>>& references,
                                        const std::vector<std::vector<int>>& knowledges,
                                        const Tensor& emb_table) {
    if (candidates.empty() || candidates.size() != references.size() ||
        candidates.size() != knowledges.size()) {
        throw DataError("evaluate_responses: candidates, references, and knowledges must be "
                        "nonempty and parallel");
    }
    MetricsReport rep;
    rep.n_examples = static_cast<int>(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        rep.bleu1 += bleu_n(candidates[i], references[i], 1);
        rep.bleu2 += bleu_n(candidates[i], references[i], 2);
        rep.rouge_l += rouge_l(candidates[i], references[i]);
        rep.knowledge_affinity += knowledge_affinity(candidates[i], knowledges[i], emb_table);
    }
    const double inv = 1.0 / static_cast<double>(rep.n_examples);
    rep.bleu1 *= inv;
    rep.bleu2 *= inv;
    rep.rouge_l *= inv;
    rep.knowledge_affinity *= inv;
    rep.dist1 = dist_n(candidates, 1);
    rep.dist2 = dist_n(candidates, 2);
    rep.dist3 = dist_n(candidates, 3);
    return rep;
}

}  // namespace kesconv
