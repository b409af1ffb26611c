// SPDX-License-Identifier: Apache-2.0
//
// Miniature pre-LN decoder-only transformer with an explicit past-state
// (key/value cache) interface. One architecture serves three roles: the
// frozen response generator and the two trainable prompt encoders.
//
// Past-state position convention: PastState.pos_offset is the position index
// assigned to the first real token fed on top of that past. A past built
// from real tokens carries pos_offset = (previous offset + tokens consumed),
// so chunked decoding reproduces full-sequence positions. A past built from
// virtual prompt vectors keeps pos_offset = 0: prompts occupy attention
// slots but no position indices.

#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "kesconv/common.hpp"
#include "kesconv/config.hpp"
#include "kesconv/param_store.hpp"
#include "kesconv/tensor.hpp"
#include "kesconv/vocab.hpp"

namespace kesconv {

struct LMConfig {
    int vocab_size = 2000;
    int n_layers = 2;
    int n_heads = 2;
    int hidden_dim = 64;
    int max_positions = 256;
    bool tie_embeddings = true;
    double init_std = 0.02;
    double emb_init_std = 0.5;

    int head_dim() const { return hidden_dim / n_heads; }

    void validate() const {
        if (vocab_size <= 0 || n_layers <= 0 || n_heads <= 0 || hidden_dim <= 0 ||
            max_positions <= 0) {
            throw ConfigError("LM dimensions must be positive");
        }
        if (hidden_dim % n_heads != 0) {
            throw ConfigError("hidden_dim must be divisible by n_heads");
        }
    }

    static LMConfig from_run(const RunConfig& rc) {
        LMConfig c;
        c.vocab_size = rc.vocab_size;
        c.n_layers = rc.n_layers;
        c.n_heads = rc.n_heads;
        c.hidden_dim = rc.hidden_dim;
        c.max_positions = rc.max_positions;
        c.tie_embeddings = rc.tie_embeddings;
        c.init_std = rc.init_std;
        c.emb_init_std = rc.emb_init_std;
        return c;
    }
};

// Cached keys/values per layer, shape [n_heads x p x head_dim]. p == 0 means
// no cache; the tensor vectors are empty in that case.
struct PastState {
    std::vector<Tensor> keys;
    std::vector<Tensor> values;
    int p = 0;
    int pos_offset = 0;

    bool empty() const { return p == 0; }
};

// Attention weights collected during a forward pass, layer-major then head:
// weights[l * n_heads + h] is [L x (p + L)].
struct AttnTrace {
    std::vector<Tensor> weights;
};

class MiniLM {
public:
    MiniLM(const LMConfig& cfg, ParamStore& store, std::string prefix)
        : cfg_(cfg), store_(&store), prefix_(std::move(prefix)) {
        cfg_.validate();
    }

    // Registers all parameters under `prefix`, drawing values from `rng` in a
    // fixed documented order (token embeddings first; retrieval depends on
    // that to reproduce embeddings from config + seed alone). Layer-norm
    // gains start at one, biases at zero, matrices at normal(0, init_std),
    // embedding tables at normal(0, emb_init_std).
    static void create_params(const LMConfig& cfg, ParamStore& store, const std::string& prefix,
                              Rng& rng) {
        cfg.validate();
        const int h = cfg.hidden_dim;
        auto w = [&](const std::string& name, Shape shape, double stdev) {
            store.add(prefix + name, Tensor::randn(std::move(shape), rng, stdev, true));
        };
        auto zeros = [&](const std::string& name, Shape shape) {
            store.add(prefix + name, Tensor::zeros(std::move(shape), true));
        };
        auto ones = [&](const std::string& name, Shape shape) {
            store.add(prefix + name, Tensor::full(std::move(shape), 1.0, true));
        };
        w("tok_emb", {cfg.vocab_size, h}, cfg.emb_init_std);
        w("pos_emb", {cfg.max_positions, h}, cfg.emb_init_std);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string lp = "h" + std::to_string(l) + ".";
            ones(lp + "ln1_g", {h});
            zeros(lp + "ln1_b", {h});
            w(lp + "attn_qkv_w", {h, 3 * h}, cfg.init_std);
            zeros(lp + "attn_qkv_b", {3 * h});
            w(lp + "attn_out_w", {h, h}, cfg.init_std);
            zeros(lp + "attn_out_b", {h});
            ones(lp + "ln2_g", {h});
            zeros(lp + "ln2_b", {h});
            w(lp + "ff_w1", {h, 4 * h}, cfg.init_std);
            zeros(lp + "ff_b1", {4 * h});
            w(lp + "ff_w2", {4 * h, h}, cfg.init_std);
            zeros(lp + "ff_b2", {h});
        }
        ones("ln_f_g", {h});
        zeros("ln_f_b", {h});
        if (!cfg.tie_embeddings) {
            w("out_w", {h, cfg.vocab_size}, cfg.init_std);
        }
    }

    const LMConfig& config() const { return cfg_; }
    const std::string& prefix() const { return prefix_; }

    Tensor& param(const std::string& name) const { return store_->get(prefix_ + name); }

    Tensor embed_tokens(const std::vector<int>& ids) const {
        for (int id : ids) {
            if (id < 0 || id >= cfg_.vocab_size) {
                throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(cfg_.vocab_size));
            }
        }
        return embedding_lookup(param("tok_emb"), ids);
    }

    // Core forward over pre-embedded inputs x: [L x hidden]. Real-token
    // positions are pos_start .. pos_start + L - 1. Returns final hidden
    // states [L x hidden] after the last layer norm; call logits() on top.
    Tensor forward_hidden(const Tensor& x_in, int pos_start, const PastState* past,
                          PastState* new_past = nullptr, AttnTrace* trace = nullptr) const {
        if (x_in.rank() != 2 || x_in.dim(1) != cfg_.hidden_dim) {
            throw ShapeError("forward: input must be [len x hidden_dim], got " +
                             shape_str(x_in.shape()));
        }
        const int L = x_in.dim(0);
        const int p = past ? past->p : 0;
        if (p + L > cfg_.max_positions) {
            throw DataError("sequence of " + std::to_string(L) + " tokens on a past of length " +
                            std::to_string(p) + " exceeds max_positions " +
                            std::to_string(cfg_.max_positions));
        }
        if (pos_start < 0 || pos_start + L > cfg_.max_positions) {
            throw DataError("positions " + std::to_string(pos_start) + ".." +
                            std::to_string(pos_start + L - 1) + " exceed max_positions " +
                            std::to_string(cfg_.max_positions));
        }
        if (past && !past->empty() &&
            (past->keys.size() != static_cast<std::size_t>(cfg_.n_layers) ||
             past->values.size() != static_cast<std::size_t>(cfg_.n_layers))) {
            throw ShapeError("past state has " + std::to_string(past->keys.size()) +
                             " layers, model has " + std::to_string(cfg_.n_layers));
        }

        std::vector<int> positions(static_cast<std::size_t>(L));
        std::iota(positions.begin(), positions.end(), pos_start);
        Tensor x = add(x_in, embedding_lookup(param("pos_emb"), positions));

        const int nh = cfg_.n_heads;
        const int hd = cfg_.head_dim();
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
        if (new_past) {
            new_past->keys.clear();
            new_past->values.clear();
        }
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string lp = "h" + std::to_string(l) + ".";
            Tensor hpre = layer_norm(x, param(lp + "ln1_g"), param(lp + "ln1_b"));
            Tensor qkv = add_bias(matmul(hpre, param(lp + "attn_qkv_w")), param(lp + "attn_qkv_b"));
            Tensor q = slice_cols(qkv, 0, cfg_.hidden_dim);
            Tensor k = slice_cols(qkv, cfg_.hidden_dim, 2 * cfg_.hidden_dim);
            Tensor v = slice_cols(qkv, 2 * cfg_.hidden_dim, 3 * cfg_.hidden_dim);

            std::vector<Tensor> k_full(static_cast<std::size_t>(nh));
            std::vector<Tensor> v_full(static_cast<std::size_t>(nh));
            Tensor att_out;  // [L x hidden], heads concatenated
            for (int hI = 0; hI < nh; ++hI) {
                Tensor qh = slice_cols(q, hI * hd, (hI + 1) * hd);
                Tensor kh = slice_cols(k, hI * hd, (hI + 1) * hd);
                Tensor vh = slice_cols(v, hI * hd, (hI + 1) * hd);
                if (p > 0) {
                    kh = concat_rows(slice_first(past->keys[static_cast<std::size_t>(l)], hI), kh);
                    vh = concat_rows(slice_first(past->values[static_cast<std::size_t>(l)], hI), vh);
                }
                k_full[static_cast<std::size_t>(hI)] = kh;
                v_full[static_cast<std::size_t>(hI)] = vh;
                Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
                Tensor att = causal_softmax(scores, p);
                if (trace) {
                    trace->weights.push_back(att);
                }
                Tensor oh = matmul(att, vh);
                att_out = hI == 0 ? oh : concat_cols(att_out, oh);
            }
            x = add(x, add_bias(matmul(att_out, param(lp + "attn_out_w")),
                                param(lp + "attn_out_b")));
            Tensor h2 = layer_norm(x, param(lp + "ln2_g"), param(lp + "ln2_b"));
            Tensor ff = add_bias(matmul(gelu(add_bias(matmul(h2, param(lp + "ff_w1")),
                                                      param(lp + "ff_b1"))),
                                        param(lp + "ff_w2")),
                                 param(lp + "ff_b2"));
            x = add(x, ff);
            if (new_past) {
                new_past->keys.push_back(stack_first(k_full));
                new_past->values.push_back(stack_first(v_full));
            }
        }
        if (new_past) {
            new_past->p = p + L;
            new_past->pos_offset = pos_start + L;
        }
        return layer_norm(x, param("ln_f_g"), param("ln_f_b"));
    }

    Tensor logits_from_hidden(const Tensor& hidden) const {
        if (cfg_.tie_embeddings) {
            return matmul(hidden, transpose(param("tok_emb")));
        }
        return matmul(hidden, param("out_w"));
    }

    // Token-id forward. Positions default to continuing the past
    // (past->pos_offset), which is 0 for no past and for virtual prompt
    // pasts.
    std::pair<Tensor, PastState> forward(const std::vector<int>& tokens,
                                         const PastState* past = nullptr,
                                         AttnTrace* trace = nullptr) const {
        if (tokens.empty()) {
            throw DataError("forward: empty token sequence");
        }
        const int pos_start = past ? past->pos_offset : 0;
        PastState np;
        Tensor hidden = forward_hidden(embed_tokens(tokens), pos_start, past, &np, trace);
        return {logits_from_hidden(hidden), std::move(np)};
    }

    // Greedy argmax continuation; ties go to the lowest token id. The
    // returned sequence includes the terminating EOS when one is produced.
    std::vector<int> greedy_decode(const std::vector<int>& context, const PastState& past,
                                   int max_new, int eos_id) const {
        if (max_new < 1) {
            throw ConfigError("greedy_decode: max_new must be >= 1");
        }
        if (context.empty()) {
            throw DataError("greedy_decode: empty context");
        }
        NoGradGuard ng;
        std::vector<int> out;
        PastState cur = past;
        std::vector<int> feed = context;
        for (int it = 0; it < max_new; ++it) {
            auto [logits, np] = forward(feed, &cur);
            const int L = logits.dim(0);
            const int V = logits.dim(1);
            const double* row = logits.data().data() + static_cast<std::size_t>(L - 1) * V;
            int best = 0;
            double best_v = row[0];
            for (int j = 1; j < V; ++j) {
                if (row[j] > best_v) {
                    best_v = row[j];
                    best = j;
                }
            }
            out.push_back(best);
            if (best == eos_id) {
                break;
            }
            cur = std::move(np);
            feed = {best};
        }
        return out;
    }

private:
    LMConfig cfg_;
    ParamStore* store_;
    std::string prefix_;
};

}  // namespace kesconv
