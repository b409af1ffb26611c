// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "kesconv/prompt.hpp"
#include "kesconv/system.hpp"
#include "kesconv/trainer.hpp"

using namespace kesconv;
using kesconv::testing::bitwise_equal;
using kesconv::testing::fd_worst_rel_err;

namespace {

Vocab tiny_vocab() {
    return Vocab::build(
        {"the quick brown fox jumps over a lazy dog near the old red barn",
         "sleep helps with worry and stress every single day for people",
         "try walking and breathing to ease the heavy mind tonight"},
        2000);
}

TrainExample tiny_example() {
    TrainExample ex;
    ex.context.dialogue_id = "dlg-test";
    ex.context.utterances = {"the quick brown fox", "worry and stress every day"};
    ex.knowledge.id = "kb-test";
    ex.knowledge.question = "what helps with worry";
    ex.knowledge.answer = "try walking and breathing to ease the mind";
    ex.retrieval_score = 0.5;
    return ex;
}

}  // namespace

TEST_CASE("prompt past shapes are exactly 5, 10, and 15 at defaults") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 17;
    KesconvSystem sys(rc, vocab);
    TrainExample ex = tiny_example();

    PastState know = sys.kpe().encode(sys.encode_knowledge(ex.knowledge, vocab));
    PastState ctx = sys.cpe().encode(sys.encode_context(ex.context, vocab));

    CHECK(know.p == 5);
    CHECK(ctx.p == 10);
    REQUIRE(know.keys.size() == 2);
    REQUIRE(ctx.keys.size() == 2);
    for (const Tensor& t : know.keys) {
        CHECK(t.shape() == Shape{2, 5, 32});
    }
    for (const Tensor& t : know.values) {
        CHECK(t.shape() == Shape{2, 5, 32});
    }
    for (const Tensor& t : ctx.keys) {
        CHECK(t.shape() == Shape{2, 10, 32});
    }

    PastState both = combine(know, ctx);
    CHECK(both.p == 15);
    CHECK(both.pos_offset == 0);
    for (const Tensor& t : both.keys) {
        CHECK(t.shape() == Shape{2, 15, 32});
    }
}

TEST_CASE("combine passes an empty side through bitwise and slices back apart") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 23;
    KesconvSystem sys(rc, vocab);
    TrainExample ex = tiny_example();

    PastState know = sys.kpe().encode(sys.encode_knowledge(ex.knowledge, vocab));
    PastState ctx = sys.cpe().encode(sys.encode_context(ex.context, vocab));

    PastState pass = combine(PastState{}, ctx);
    CHECK(pass.p == ctx.p);
    for (std::size_t l = 0; l < ctx.keys.size(); ++l) {
        CHECK(bitwise_equal(pass.keys[l].data(), ctx.keys[l].data()));
        CHECK(bitwise_equal(pass.values[l].data(), ctx.values[l].data()));
    }

    PastState both = combine(know, ctx);
    const int d = know.p;
    for (std::size_t l = 0; l < both.keys.size(); ++l) {
        for (int head = 0; head < 2; ++head) {
            Tensor merged_k = slice_first(both.keys[l], head);
            Tensor merged_v = slice_first(both.values[l], head);
            CHECK(bitwise_equal(slice_rows(merged_k, 0, d).data(),
                                slice_first(know.keys[l], head).data()));
            CHECK(bitwise_equal(slice_rows(merged_k, d, both.p).data(),
                                slice_first(ctx.keys[l], head).data()));
            CHECK(bitwise_equal(slice_rows(merged_v, 0, d).data(),
                                slice_first(know.values[l], head).data()));
            CHECK(bitwise_equal(slice_rows(merged_v, d, both.p).data(),
                                slice_first(ctx.values[l], head).data()));
        }
    }
}

TEST_CASE("combine rejects mismatched layer counts") {
    Rng rng(31);
    auto make_past = [&](int layers, int p) {
        PastState past;
        past.p = p;
        for (int l = 0; l < layers; ++l) {
            past.keys.push_back(Tensor::randn({2, p, 4}, rng, 1.0));
            past.values.push_back(Tensor::randn({2, p, 4}, rng, 1.0));
        }
        return past;
    };
    CHECK_THROWS_AS(combine(make_past(2, 3), make_past(3, 4)), ShapeError);
    CHECK_THROWS_AS(combine(make_past(1, 3), make_past(2, 4)), ShapeError);
    CHECK_NOTHROW(combine(make_past(2, 3), make_past(2, 4)));
}

TEST_CASE("zeroed reparameterizer output layer yields an exactly zero past") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 37;
    KesconvSystem sys(rc, vocab);

    for (const std::string& name : {std::string("kpe.rep_w2"), std::string("kpe.rep_b2")}) {
        Tensor t = sys.store().get(name);
        std::fill(t.data().begin(), t.data().end(), 0.0);
    }

    for (const std::string& text :
         {std::string("sleep helps with worry"), std::string("the lazy dog")}) {
        PastState past = sys.kpe().encode(vocab.encode(text));
        CHECK(past.p == 5);
        for (const Tensor& t : past.keys) {
            for (double v : t.data()) {
                REQUIRE(v == 0.0);
            }
        }
        for (const Tensor& t : past.values) {
            for (double v : t.data()) {
                REQUIRE(v == 0.0);
            }
        }
    }
}

TEST_CASE("different knowledge conditions different pasts") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 41;
    KesconvSystem sys(rc, vocab);

    PastState a = sys.kpe().encode(vocab.encode("sleep helps with worry"));
    PastState b = sys.kpe().encode(vocab.encode("try walking and breathing"));
    bool all_equal = true;
    for (std::size_t l = 0; l < a.keys.size(); ++l) {
        all_equal = all_equal && bitwise_equal(a.keys[l].data(), b.keys[l].data()) &&
                    bitwise_equal(a.values[l].data(), b.values[l].data());
    }
    CHECK_FALSE(all_equal);
}

TEST_CASE("prepending a context token changes the prompt encoding") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 43;
    KesconvSystem sys(rc, vocab);

    std::vector<int> ids = vocab.encode("worry and stress every day");
    std::vector<int> prefixed = vocab.encode("sleep worry and stress every day");
    PastState a = sys.cpe().encode(ids);
    PastState b = sys.cpe().encode(prefixed);
    CHECK_FALSE(bitwise_equal(a.keys[0].data(), b.keys[0].data()));
}

TEST_CASE("empty knowledge encodes prompts alone without error") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 47;
    KesconvSystem sys(rc, vocab);

    PastState past = sys.kpe().encode({});
    CHECK(past.p == 5);
    for (const Tensor& t : past.keys) {
        CHECK(t.shape() == Shape{2, 5, 32});
    }
}

TEST_CASE("prompt encodings are deterministic") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 53;
    KesconvSystem sys(rc, vocab);
    auto ids = vocab.encode("the quick brown fox");
    PastState a = sys.kpe().encode(ids);
    PastState b = sys.kpe().encode(ids);
    for (std::size_t l = 0; l < a.keys.size(); ++l) {
        CHECK(bitwise_equal(a.keys[l].data(), b.keys[l].data()));
        CHECK(bitwise_equal(a.values[l].data(), b.values[l].data()));
    }
}

TEST_CASE("truncation sides: knowledge keeps the head, context keeps the tail") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 59;
    rc.knowledge_truncate = 3;
    rc.context_truncate = 4;
    KesconvSystem sys(rc, vocab);

    std::vector<int> ids = vocab.encode("the quick brown fox jumps over");
    REQUIRE(ids.size() == 6);
    auto k = sys.kpe().truncate(ids);
    auto c = sys.cpe().truncate(ids);
    CHECK(k == std::vector<int>(ids.begin(), ids.begin() + 3));
    CHECK(c == std::vector<int>(ids.end() - 4, ids.end()));
}

TEST_CASE("every prompt parameter group receives gradient through the loss") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 61;
    KesconvSystem sys(rc, vocab);
    TrainExample ex = tiny_example();
    ex.response = vocab.encode("try walking tonight");
    ex.response.push_back(Vocab::kEos);

    Tensor loss = compute_loss(sys, vocab, ex);
    backward(loss);

    int checked = 0;
    for (const std::string& name : sys.store().names()) {
        Tensor t = sys.store().get(name);
        if (name.rfind("rgd.", 0) == 0) {
            CHECK_FALSE(t.has_grad());  // frozen backbone is never recorded
            continue;
        }
        ++checked;
        REQUIRE(t.has_grad());
        bool nonzero = false;
        for (double g : t.grad()) {
            nonzero = nonzero || g != 0.0;
        }
        INFO(name);
        CHECK(nonzero);
    }
    CHECK(checked > 0);
}

TEST_CASE("prompt embedding and MLP gradients match finite differences") {
    Vocab vocab = tiny_vocab();
    RunConfig rc;
    rc.seed = 67;
    // A small backbone keeps the finite-difference loop quick while using
    // the full kesconv loss path.
    rc.hidden_dim = 16;
    rc.n_heads = 2;
    KesconvSystem sys(rc, vocab);
    TrainExample ex = tiny_example();
    ex.response = vocab.encode("ease the mind");
    ex.response.push_back(Vocab::kEos);

    auto forward = [&]() { return compute_loss(sys, vocab, ex); };
    std::vector<Tensor> probes = {sys.store().get("kpe.prompt_emb"),
                                  sys.store().get("cpe.rep_b1"),
                                  sys.store().get("kpe.rep_b1")};
    CHECK(fd_worst_rel_err(forward, probes) < 1e-4);
}
