// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "kesconv/common.hpp"
#include "kesconv/metrics.hpp"

using namespace kesconv;

namespace {

using Ids = std::vector<int>;

// Independent BLEU-n: map-based n-gram clipping, smoothing 1/(2|cand|) when
// a precision is zero, brevity penalty min(1, exp(1 - r/c)), geometric mean.
double bleu_oracle(const Ids& cand, const Ids& ref, int n) {
    if (cand.empty()) {
        return 0.0;
    }
    double log_sum = 0.0;
    for (int k = 1; k <= n; ++k) {
        std::map<Ids, int> cc, rc;
        for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= cand.size(); ++i) {
            ++cc[Ids(cand.begin() + static_cast<std::ptrdiff_t>(i),
                     cand.begin() + static_cast<std::ptrdiff_t>(i) + k)];
        }
        for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= ref.size(); ++i) {
            ++rc[Ids(ref.begin() + static_cast<std::ptrdiff_t>(i),
                     ref.begin() + static_cast<std::ptrdiff_t>(i) + k)];
        }
        long long match = 0, total = 0;
        for (const auto& [gram, c] : cc) {
            total += c;
            auto it = rc.find(gram);
            if (it != rc.end()) {
                match += std::min(c, it->second);
            }
        }
        double p = (total > 0 && match > 0)
                       ? static_cast<double>(match) / static_cast<double>(total)
                       : 1.0 / (2.0 * static_cast<double>(cand.size()));
        log_sum += std::log(p);
    }
    const double bp = std::min(
        1.0, std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(cand.size())));
    return bp * std::exp(log_sum / n);
}

// Independent ROUGE-L F1 via the full LCS matrix.
double rouge_oracle(const Ids& cand, const Ids& ref) {
    if (cand.empty() || ref.empty()) {
        return 0.0;
    }
    std::vector<std::vector<int>> dp(cand.size() + 1, std::vector<int>(ref.size() + 1, 0));
    for (std::size_t i = 1; i <= cand.size(); ++i) {
        for (std::size_t j = 1; j <= ref.size(); ++j) {
            dp[i][j] = cand[i - 1] == ref[j - 1] ? dp[i - 1][j - 1] + 1
                                                 : std::max(dp[i - 1][j], dp[i][j - 1]);
        }
    }
    const int lcs = dp[cand.size()][ref.size()];
    if (lcs == 0) {
        return 0.0;
    }
    const double p = static_cast<double>(lcs) / static_cast<double>(cand.size());
    const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

Ids random_ids(Rng& rng, int max_len, int vocab) {
    Ids out(1 + rng.randint(max_len));
    for (auto& x : out) {
        x = rng.randint(vocab);
    }
    return out;
}

}  // namespace

TEST_CASE("BLEU worked examples") {
    CHECK(bleu_n({4, 7, 9}, {4, 7, 9}, 1) == 1.0);
    CHECK(bleu_n({4, 7, 9}, {4, 7, 9}, 2) == Catch::Approx(1.0).margin(1e-15));

    // "the cat" vs "the cat sat": unigram precision 1, BP = exp(1 - 3/2).
    CHECK(bleu_n({10, 11}, {10, 11, 12}, 1) ==
          Catch::Approx(std::exp(-0.5)).margin(1e-12));

    // Zero overlap smooths each precision to 1/(2 * |cand|); BP is 1 when
    // the candidate is longer than the reference.
    CHECK(bleu_n({9, 9, 9, 9}, {1, 2}, 1) == Catch::Approx(0.125).margin(1e-12));

    // Mixed bigram case: p1 = 2/3, p2 = 1/2, equal lengths.
    CHECK(bleu_n({1, 2, 3}, {1, 2, 4}, 2) ==
          Catch::Approx(std::sqrt(2.0 / 3.0 * 0.5)).margin(1e-12));

    // Repetition is clipped by the reference count.
    CHECK(bleu_n({5, 5, 5}, {5, 6}, 1) == Catch::Approx(1.0 / 3.0).margin(1e-12));

    CHECK(bleu_n({}, {1, 2}, 1) == 0.0);
    CHECK_THROWS_AS(bleu_n({1}, {1}, 3), ConfigError);
    CHECK_THROWS_AS(bleu_n({1}, {1}, 0), ConfigError);
}

TEST_CASE("DIST worked examples") {
    CHECK(dist_n({{1, 1, 2}}, 1) == Catch::Approx(2.0 / 3.0).margin(1e-15));
    CHECK(dist_n({{1, 1, 2}}, 2) == 1.0);
    CHECK(dist_n({{3}, {3}, {3}}, 1) == Catch::Approx(1.0 / 3.0).margin(1e-15));
    CHECK(dist_n({{1}, {2}, {3}}, 1) == 1.0);
    CHECK(dist_n({{1, 2}, {2, 1}}, 2) == 1.0);  // (1,2) and (2,1) differ

    // Responses shorter than n contribute nothing.
    CHECK(dist_n({{7}, {1, 2, 3}}, 2) == 1.0);
    CHECK(dist_n({{7}}, 2) == 0.0);
    CHECK(dist_n({}, 1) == 0.0);
    CHECK_THROWS_AS(dist_n({{1}}, 4), ConfigError);

    SECTION("adding a duplicated response never raises dist1") {
        Rng rng(5);
        std::vector<Ids> corpus;
        for (int i = 0; i < 8; ++i) {
            corpus.push_back(random_ids(rng, 6, 5));
        }
        double before = dist_n(corpus, 1);
        corpus.push_back(corpus.front());
        CHECK(dist_n(corpus, 1) <= before + 1e-15);
    }
    SECTION("order of responses does not matter") {
        std::vector<Ids> corpus = {{1, 2}, {2, 3, 4}, {1}, {4, 4}};
        std::vector<Ids> shuffled = {{4, 4}, {1}, {1, 2}, {2, 3, 4}};
        for (int n = 1; n <= 3; ++n) {
            CHECK(dist_n(corpus, n) == dist_n(shuffled, n));
        }
    }
}

TEST_CASE("ROUGE-L worked examples") {
    CHECK(rouge_l({1, 2, 3}, {1, 2, 3}) == Catch::Approx(1.0).margin(1e-15));
    CHECK(rouge_l({1, 2, 3, 4, 5}, {1, 2, 3, 4, 6}) == Catch::Approx(0.8).margin(1e-12));
    CHECK(rouge_l({1, 2}, {1, 2, 3, 4}) == Catch::Approx(2.0 / 3.0).margin(1e-12));
    CHECK(rouge_l({7, 8}, {9, 10}) == 0.0);
    CHECK(rouge_l({}, {1}) == 0.0);
    CHECK(rouge_l({1}, {}) == 0.0);
    // LCS is order-sensitive: a reversed reference shares only one token run.
    CHECK(rouge_l({1, 2, 3}, {3, 2, 1}) == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("knowledge affinity is a shifted cosine over pooled rows") {
    Tensor table = Tensor::zeros({4, 2});
    auto set_row = [&](int r, double x, double y) {
        table.data()[static_cast<std::size_t>(r) * 2] = x;
        table.data()[static_cast<std::size_t>(r) * 2 + 1] = y;
    };
    set_row(0, 1.0, 0.0);
    set_row(1, -1.0, 0.0);
    set_row(2, 0.0, 1.0);
    // row 3 stays zero

    CHECK(knowledge_affinity({0}, {0}, table) == Catch::Approx(1.0).margin(1e-12));
    CHECK(knowledge_affinity({0}, {1}, table) == Catch::Approx(0.0).margin(1e-12));
    CHECK(knowledge_affinity({0}, {2}, table) == Catch::Approx(0.5).margin(1e-12));
    CHECK(knowledge_affinity({}, {0}, table) == 0.5);
    CHECK(knowledge_affinity({3}, {0}, table) == 0.5);
    CHECK_THROWS_AS(knowledge_affinity({4}, {0}, table), DataError);
    CHECK_THROWS_AS(knowledge_affinity({-1}, {0}, table), DataError);
    CHECK_THROWS_AS(knowledge_affinity({0}, {0}, Tensor::zeros({4})), ShapeError);

    SECTION("random pairs match a direct cosine computation") {
        Rng rng(23);
        Tensor emb = Tensor::randn({30, 8}, rng, 1.0);
        for (int trial = 0; trial < 50; ++trial) {
            Ids a = random_ids(rng, 10, 30);
            Ids b = random_ids(rng, 10, 30);
            auto pool = [&](const Ids& ids) {
                std::vector<double> v(8, 0.0);
                for (int id : ids) {
                    for (int j = 0; j < 8; ++j) {
                        v[static_cast<std::size_t>(j)] +=
                            emb.data()[static_cast<std::size_t>(id) * 8 + j];
                    }
                }
                for (auto& x : v) {
                    x /= static_cast<double>(ids.size());
                }
                return v;
            };
            auto va = pool(a);
            auto vb = pool(b);
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int j = 0; j < 8; ++j) {
                dot += va[static_cast<std::size_t>(j)] * vb[static_cast<std::size_t>(j)];
                na += va[static_cast<std::size_t>(j)] * va[static_cast<std::size_t>(j)];
                nb += vb[static_cast<std::size_t>(j)] * vb[static_cast<std::size_t>(j)];
            }
            const double want = 0.5 * (1.0 + dot / (std::sqrt(na) * std::sqrt(nb)));
            CHECK(knowledge_affinity(a, b, emb) == Catch::Approx(want).margin(1e-9));
        }
    }
}

TEST_CASE("library scores match brute-force reimplementations on random pairs") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        Ids cand = random_ids(rng, 12, 8);
        Ids ref = random_ids(rng, 12, 8);
        CHECK(bleu_n(cand, ref, 1) == Catch::Approx(bleu_oracle(cand, ref, 1)).margin(1e-9));
        CHECK(bleu_n(cand, ref, 2) == Catch::Approx(bleu_oracle(cand, ref, 2)).margin(1e-9));
        CHECK(rouge_l(cand, ref) == Catch::Approx(rouge_oracle(cand, ref)).margin(1e-9));
    }
}

TEST_CASE("corpus aggregation averages pairs and is bounded") {
    Rng rng(37);
    Tensor emb = Tensor::randn({20, 6}, rng, 1.0);

    std::vector<Ids> cands = {{1, 2}, {3, 4, 5}};
    std::vector<Ids> refs = {{1, 2, 3}, {3, 9}};
    std::vector<Ids> knows = {{4, 5}, {6, 7}};
    MetricsReport rep = evaluate_responses(cands, refs, knows, emb);

    CHECK(rep.n_examples == 2);
    const double want_bleu1 = 0.5 * (bleu_oracle({1, 2}, {1, 2, 3}, 1) +
                                     bleu_oracle({3, 4, 5}, {3, 9}, 1));
    CHECK(rep.bleu1 == Catch::Approx(want_bleu1).margin(1e-12));
    const double want_rouge = 0.5 * (rouge_oracle({1, 2}, {1, 2, 3}) +
                                     rouge_oracle({3, 4, 5}, {3, 9}));
    CHECK(rep.rouge_l == Catch::Approx(want_rouge).margin(1e-12));
    CHECK(rep.dist1 == 1.0);  // all five candidate tokens distinct

    for (double v : {rep.bleu1, rep.bleu2, rep.dist1, rep.dist2, rep.dist3, rep.rouge_l,
                     rep.knowledge_affinity}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    nlohmann::ordered_json j = rep.to_json();
    CHECK(j["n_examples"] == 2);
    CHECK(j["bleu1"].get<double>() == rep.bleu1);
    CHECK(rep.to_table().find("knowledge_affinity") != std::string::npos);

    CHECK_THROWS_AS(evaluate_responses({}, {}, {}, emb), DataError);
    CHECK_THROWS_AS(evaluate_responses(cands, {refs[0]}, knows, emb), DataError);
    CHECK_THROWS_AS(evaluate_responses(cands, refs, {knows[0]}, emb), DataError);
}
