// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "kesconv/lm.hpp"
#include "kesconv/param_store.hpp"
#include "kesconv/vocab.hpp"

using namespace kesconv;
using kesconv::testing::bitwise_equal;
using kesconv::testing::max_abs_diff;

namespace {

LMConfig toy_cfg() {
    LMConfig cfg;
    cfg.vocab_size = 23;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.hidden_dim = 16;
    cfg.max_positions = 48;
    cfg.tie_embeddings = true;
    cfg.init_std = 0.35;      // rich random features at toy scale
    cfg.emb_init_std = 0.5;
    return cfg;
}

struct ToyLM {
    ParamStore store;
    LMConfig cfg;
    Rng rng;

    explicit ToyLM(uint64_t seed = 101) : cfg(toy_cfg()), rng(seed) {
        MiniLM::create_params(cfg, store, "m.", rng);
    }
    MiniLM model() { return MiniLM(cfg, store, "m."); }
};

std::vector<int> iota_tokens(int n, int start = 5) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        t[static_cast<std::size_t>(i)] = start + (i % 17);
    }
    return t;
}

}  // namespace

TEST_CASE("tokenizer smoke checks") {
    Vocab v({"<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "hello", ",", "world", "the"});

    CHECK(v.encode("").empty());

    auto ids = v.encode("Hello, world");
    REQUIRE(ids.size() == 3);
    CHECK(ids[0] == v.id_or_unk("hello"));
    CHECK(ids[1] == v.id_or_unk(","));
    CHECK(ids[2] == v.id_or_unk("world"));

    // Exactly one UNK at the out-of-vocab position.
    auto with_oov = v.encode("the zorp world");
    REQUIRE(with_oov.size() == 3);
    CHECK(with_oov[0] == v.id_or_unk("the"));
    CHECK(with_oov[1] == Vocab::kUnk);
    CHECK(with_oov[2] == v.id_or_unk("world"));
    CHECK(std::count(with_oov.begin(), with_oov.end(), Vocab::kUnk) == 1);

    // Round trip modulo case and spacing.
    CHECK(v.decode(v.encode("Hello world")) == "hello world");

    // Special literals map to reserved ids, case-insensitively.
    auto sp = v.encode("hello <SEP> world <eos>");
    REQUIRE(sp.size() == 4);
    CHECK(sp[1] == Vocab::kSep);
    CHECK(sp[3] == Vocab::kEos);
}

TEST_CASE("forward with an empty past equals forward with no past, bitwise") {
    ToyLM toy;
    MiniLM lm = toy.model();
    const auto tokens = iota_tokens(7);

    auto [logits_none, past_none] = lm.forward(tokens);
    PastState empty;
    auto [logits_empty, past_after] = lm.forward(tokens, &empty);

    CHECK(bitwise_equal(logits_none.data(), logits_empty.data()));
    CHECK(past_none.p == 7);
    CHECK(past_after.p == 7);
    CHECK(past_none.pos_offset == 7);
}

TEST_CASE("causality: editing later tokens never changes earlier logits") {
    ToyLM toy;
    MiniLM lm = toy.model();
    auto tokens = iota_tokens(9);

    auto [logits_a, pa] = lm.forward(tokens);
    for (int t : {4, 6, 8}) {
        auto edited = tokens;
        edited[static_cast<std::size_t>(t)] = 21;  // perturb position t
        auto [logits_b, pb] = lm.forward(edited);
        const int v = toy.cfg.vocab_size;
        for (int r = 0; r < t; ++r) {
            for (int c = 0; c < v; ++c) {
                const auto idx = static_cast<std::size_t>(r) * v + c;
                REQUIRE(logits_a.data()[idx] == logits_b.data()[idx]);
            }
        }
    }
}

TEST_CASE("chunked forward equals full forward within 1e-5") {
    ToyLM toy;
    MiniLM lm = toy.model();
    const auto tokens = iota_tokens(12);

    auto [full_logits, full_past] = lm.forward(tokens);

    for (int split : {1, 5, 11}) {
        std::vector<int> s1(tokens.begin(), tokens.begin() + split);
        std::vector<int> s2(tokens.begin() + split, tokens.end());
        auto [l1, p1] = lm.forward(s1);
        auto [l2, p2] = lm.forward(s2, &p1);

        const int v = toy.cfg.vocab_size;
        const int tail = static_cast<int>(s2.size());
        std::vector<double> full_tail(full_logits.data().end() -
                                          static_cast<std::ptrdiff_t>(tail) * v,
                                      full_logits.data().end());
        CHECK(max_abs_diff(full_tail, l2.data()) < 1e-5);
        CHECK(p2.p == 12);
        CHECK(p2.pos_offset == 12);
    }
}

TEST_CASE("attention rows sum to 1 within 1e-9") {
    ToyLM toy;
    MiniLM lm = toy.model();
    const auto tokens = iota_tokens(6);

    // Include a nonempty virtual past so past columns are exercised too.
    Rng r(55);
    PastState past;
    past.p = 3;
    past.pos_offset = 0;
    for (int l = 0; l < toy.cfg.n_layers; ++l) {
        past.keys.push_back(
            Tensor::randn({toy.cfg.n_heads, 3, toy.cfg.head_dim()}, r, 0.5));
        past.values.push_back(
            Tensor::randn({toy.cfg.n_heads, 3, toy.cfg.head_dim()}, r, 0.5));
    }

    AttnTrace trace;
    lm.forward(tokens, &past, &trace);
    REQUIRE(trace.weights.size() ==
            static_cast<std::size_t>(toy.cfg.n_layers * toy.cfg.n_heads));
    for (const Tensor& w : trace.weights) {
        REQUIRE(w.dim(0) == 6);
        REQUIRE(w.dim(1) == 9);
        for (int row = 0; row < 6; ++row) {
            double acc = 0.0;
            for (int col = 0; col < 9; ++col) {
                acc += w.data()[static_cast<std::size_t>(row) * 9 + col];
            }
            CHECK(std::abs(acc - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("a nonempty random past changes the logits") {
    ToyLM toy;
    MiniLM lm = toy.model();
    const auto tokens = iota_tokens(5);

    auto [plain, p0] = lm.forward(tokens);

    Rng r(77);
    PastState past;
    past.p = 4;
    past.pos_offset = 0;
    for (int l = 0; l < toy.cfg.n_layers; ++l) {
        past.keys.push_back(
            Tensor::randn({toy.cfg.n_heads, 4, toy.cfg.head_dim()}, r, 1.0));
        past.values.push_back(
            Tensor::randn({toy.cfg.n_heads, 4, toy.cfg.head_dim()}, r, 1.0));
    }
    auto [steered, p1] = lm.forward(tokens, &past);
    CHECK_FALSE(bitwise_equal(plain.data(), steered.data()));
}

TEST_CASE("max_positions overflow is an explicit length error") {
    ToyLM toy;
    MiniLM lm = toy.model();
    CHECK_THROWS_AS(lm.forward(iota_tokens(toy.cfg.max_positions + 1)), DataError);

    auto [l1, p1] = lm.forward(iota_tokens(40));
    CHECK_THROWS_AS(lm.forward(iota_tokens(9), &p1), DataError);
    CHECK_NOTHROW(lm.forward(iota_tokens(8), &p1));
}

TEST_CASE("greedy decode stops at an immediate EOS") {
    // With a zeroed transformer the residual stream is tok_emb + pos_emb;
    // rig the tied embedding so EOS always wins the argmax.
    ToyLM toy;
    for (const auto& name : toy.store.names()) {
        if (name.find("attn_") != std::string::npos || name.find("ff_") != std::string::npos) {
            Tensor t = toy.store.get(name);
            std::fill(t.data().begin(), t.data().end(), 0.0);
        }
    }
    Tensor emb = toy.store.get("m.tok_emb");
    Tensor pos = toy.store.get("m.pos_emb");
    std::fill(emb.data().begin(), emb.data().end(), 0.0);
    std::fill(pos.data().begin(), pos.data().end(), 0.0);
    const int h = toy.cfg.hidden_dim;
    // EOS = 3 x BOS: the normalized BOS hidden then scores EOS three times
    // higher than BOS itself, and every other token scores zero.
    emb.data()[static_cast<std::size_t>(Vocab::kBos) * h + 0] = 1.0;
    emb.data()[static_cast<std::size_t>(Vocab::kBos) * h + 1] = -1.0;
    emb.data()[static_cast<std::size_t>(Vocab::kEos) * h + 0] = 3.0;
    emb.data()[static_cast<std::size_t>(Vocab::kEos) * h + 1] = -3.0;

    MiniLM lm = toy.model();
    auto out = lm.greedy_decode({Vocab::kBos}, PastState{}, 8, Vocab::kEos);
    REQUIRE(out.size() == 1);
    CHECK(out[0] == Vocab::kEos);
}

TEST_CASE("greedy decode is deterministic") {
    ToyLM toy;
    MiniLM lm = toy.model();
    auto a = lm.greedy_decode({Vocab::kBos, 7, 9}, PastState{}, 12, Vocab::kEos);
    auto b = lm.greedy_decode({Vocab::kBos, 7, 9}, PastState{}, 12, Vocab::kEos);
    CHECK(a == b);
    CHECK(a.size() <= 12);
}

TEST_CASE("hand-built weights force an exact 3-token continuation") {
    // 1 layer, 1 head, hidden 4, untied output head, everything zero except
    // token embeddings and the output projection: the residual stream is
    // ln_f(tok_emb), and W_out routes each token's normalized one-hot
    // pattern to the logit of its designated successor: BOS -> 5 -> 6 -> EOS.
    LMConfig cfg;
    cfg.vocab_size = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.hidden_dim = 4;
    cfg.max_positions = 16;
    cfg.tie_embeddings = false;

    ParamStore store;
    Rng rng(1);
    MiniLM::create_params(cfg, store, "m.", rng);
    for (const auto& name : store.names()) {
        Tensor t = store.get(name);
        if (name.find("ln") != std::string::npos && name.find("_g") != std::string::npos) {
            std::fill(t.data().begin(), t.data().end(), 1.0);
        } else {
            std::fill(t.data().begin(), t.data().end(), 0.0);
        }
    }

    Tensor emb = store.get("m.tok_emb");
    auto one_hot_row = [&](int token, int axis) {
        emb.data()[static_cast<std::size_t>(token) * 4 + static_cast<std::size_t>(axis)] = 1.0;
    };
    one_hot_row(Vocab::kBos, 0);
    one_hot_row(5, 1);
    one_hot_row(6, 2);

    // Standardized one-hot over 4 dims: on-axis sqrt(3), off-axis -1/sqrt(3).
    const double hi = std::sqrt(3.0);
    const double lo = -1.0 / std::sqrt(3.0);
    auto pattern = [&](int axis) {
        std::vector<double> p(4, lo);
        p[static_cast<std::size_t>(axis)] = hi;
        return p;
    };
    Tensor w_out = store.get("m.out_w");  // [4 x 8]
    auto set_col = [&](int col, const std::vector<double>& p) {
        for (int r = 0; r < 4; ++r) {
            w_out.data()[static_cast<std::size_t>(r) * 8 + col] = p[static_cast<std::size_t>(r)];
        }
    };
    set_col(5, pattern(0));     // after BOS -> token 5
    set_col(6, pattern(1));     // after 5 -> token 6
    set_col(Vocab::kEos, pattern(2));  // after 6 -> EOS

    MiniLM lm(cfg, store, "m.");

    // Hand-check one forward: logits after BOS put sqrt(3)^2 + 3*(1/3) = 4
    // on token 5 and -4/3 on the other designated columns.
    auto [logits, past] = lm.forward({Vocab::kBos});
    CHECK(std::abs(logits.data()[5] - 4.0) < 1e-6);
    CHECK(std::abs(logits.data()[6] - (-4.0 / 3.0)) < 1e-6);
    CHECK(logits.data()[0] == 0.0);

    auto out = lm.greedy_decode({Vocab::kBos}, PastState{}, 10, Vocab::kEos);
    CHECK(out == std::vector<int>{5, 6, Vocab::kEos});
}

TEST_CASE("create_params draws identically for identical seeds") {
    ToyLM a(5), b(5), c(6);
    CHECK(a.store.hash_prefix("m.") == b.store.hash_prefix("m."));
    CHECK(a.store.hash_prefix("m.") != c.store.hash_prefix("m."));
}
