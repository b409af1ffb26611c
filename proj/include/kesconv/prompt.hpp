// SPDX-License-Identifier: Apache-2.0
//
// Prompt encoding: a trainable encoder (a full backbone copy) runs a causal
// forward over [input tokens ; count virtual prompt embeddings]; the final
// hidden vector at each prompt position passes through a two-layer MLP
// (hidden -> hidden, tanh, -> n_layers * 2 * hidden) whose output reshapes
// into one (key, value) pair per decoder layer per prompt position. The
// resulting PastState is virtual: it occupies attention slots of the
// downstream decoder but no position indices.
//
// MLP output row layout for prompt position i:
//   [layer0 K | layer0 V | layer1 K | layer1 V | ...], each block hidden wide.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kesconv/common.hpp"
#include "kesconv/lm.hpp"
#include "kesconv/param_store.hpp"
#include "kesconv/tensor.hpp"

namespace kesconv {

enum class Truncate { kRight, kLeft };

class PromptEncoder {
public:
    // Binds to parameters under `prefix` (backbone + prompt block + MLP).
    PromptEncoder(const LMConfig& cfg, ParamStore& store, std::string prefix, int prompt_len,
                  int truncate_limit, Truncate truncate_side)
        : backbone_(cfg, store, prefix),
          store_(&store),
          prefix_(std::move(prefix)),
          count_(prompt_len),
          truncate_limit_(truncate_limit),
          truncate_side_(truncate_side) {
        if (count_ < 1) {
            throw ConfigError("prompt length must be >= 1, got " + std::to_string(count_));
        }
        if (truncate_limit_ < 1) {
            throw ConfigError("truncation limit must be >= 1");
        }
        if (truncate_limit_ + count_ > cfg.max_positions) {
            throw ConfigError("truncation limit " + std::to_string(truncate_limit_) +
                              " plus prompt length " + std::to_string(count_) +
                              " exceeds max_positions " + std::to_string(cfg.max_positions));
        }
    }

    // Registers the prompt block and MLP under `prefix`. The backbone's
    // parameters must already exist (they are copied from the shared init).
    // Prompt embeddings warm-start as the decoder embeddings of the most
    // frequent non-special tokens, which are ids 5 .. 5+count-1 because the
    // vocabulary is frequency-ordered.
    static void create_params(const LMConfig& cfg, ParamStore& store, const std::string& prefix,
                              int prompt_len, const Tensor& rgd_tok_emb, Rng& rng) {
        const int h = cfg.hidden_dim;
        if (cfg.vocab_size < Vocab::kNumSpecials + prompt_len) {
            throw ConfigError("vocabulary too small to warm-start " + std::to_string(prompt_len) +
                              " prompt embeddings");
        }
        std::vector<double> rows(static_cast<std::size_t>(prompt_len) * h);
        const double* src = rgd_tok_emb.data().data();
        for (int i = 0; i < prompt_len; ++i) {
            const std::size_t from = static_cast<std::size_t>(Vocab::kNumSpecials + i) * h;
            std::copy(src + from, src + from + h,
                      rows.begin() + static_cast<std::ptrdiff_t>(i) * h);
        }
        store.add(prefix + "prompt_emb",
                  Tensor::from({prompt_len, h}, std::move(rows), true));
        store.add(prefix + "rep_w1", Tensor::randn({h, h}, rng, cfg.init_std, true));
        store.add(prefix + "rep_b1", Tensor::zeros({h}, true));
        store.add(prefix + "rep_w2",
                  Tensor::randn({h, cfg.n_layers * 2 * h}, rng, cfg.init_std, true));
        store.add(prefix + "rep_b2", Tensor::zeros({cfg.n_layers * 2 * h}, true));
    }

    int prompt_len() const { return count_; }
    const MiniLM& backbone() const { return backbone_; }

    std::vector<int> truncate(std::vector<int> ids) const {
        const std::size_t lim = static_cast<std::size_t>(truncate_limit_);
        if (ids.size() <= lim) {
            return ids;
        }
        if (truncate_side_ == Truncate::kRight) {
            ids.resize(lim);
            return ids;
        }
        return std::vector<int>(ids.end() - static_cast<std::ptrdiff_t>(lim), ids.end());
    }

    // Empty input is allowed: the encoder then runs over the prompt block
    // alone. Output past length is always exactly `count`.
    PastState encode(const std::vector<int>& input_ids) const {
        const std::vector<int> ids = truncate(input_ids);
        const LMConfig& cfg = backbone_.config();
        Tensor prompt_rows = store_->get(prefix_ + "prompt_emb");
        Tensor x = ids.empty() ? prompt_rows
                               : concat_rows(backbone_.embed_tokens(ids), prompt_rows);
        Tensor hidden = backbone_.forward_hidden(x, /*pos_start=*/0, /*past=*/nullptr);
        const int k = static_cast<int>(ids.size());
        Tensor hp = k == 0 ? hidden : slice_rows(hidden, k, k + count_);

        Tensor z = tanh_op(add_bias(matmul(hp, store_->get(prefix_ + "rep_w1")),
                                    store_->get(prefix_ + "rep_b1")));
        Tensor flat = add_bias(matmul(z, store_->get(prefix_ + "rep_w2")),
                               store_->get(prefix_ + "rep_b2"));

        const int h = cfg.hidden_dim;
        const int nh = cfg.n_heads;
        const int hd = cfg.head_dim();
        PastState past;
        past.p = count_;
        past.pos_offset = 0;
        for (int l = 0; l < cfg.n_layers; ++l) {
            Tensor kl = slice_cols(flat, l * 2 * h, l * 2 * h + h);
            Tensor vl = slice_cols(flat, l * 2 * h + h, (l + 1) * 2 * h);
            std::vector<Tensor> kh(static_cast<std::size_t>(nh));
            std::vector<Tensor> vh(static_cast<std::size_t>(nh));
            for (int i = 0; i < nh; ++i) {
                kh[static_cast<std::size_t>(i)] = slice_cols(kl, i * hd, (i + 1) * hd);
                vh[static_cast<std::size_t>(i)] = slice_cols(vl, i * hd, (i + 1) * hd);
            }
            past.keys.push_back(stack_first(kh));
            past.values.push_back(stack_first(vh));
        }
        return past;
    }

private:
    MiniLM backbone_;
    ParamStore* store_;
    std::string prefix_;
    int count_;
    int truncate_limit_;
    Truncate truncate_side_;
};

// Position-axis concatenation per layer, knowledge block first. An empty side
// passes the other through untouched (knowledge-ablation path). The result is
// virtual: downstream real-token positions start at 0.
inline PastState combine(const PastState& knowledge, const PastState& context) {
    if (knowledge.empty()) {
        return context;
    }
    if (context.empty()) {
        return knowledge;
    }
    if (knowledge.keys.size() != context.keys.size()) {
        throw ShapeError("combine: layer count mismatch, " +
                         std::to_string(knowledge.keys.size()) + " vs " +
                         std::to_string(context.keys.size()));
    }
    PastState out;
    out.p = knowledge.p + context.p;
    out.pos_offset = 0;
    for (std::size_t l = 0; l < knowledge.keys.size(); ++l) {
        const Tensor& ka = knowledge.keys[l];
        const Tensor& kb = context.keys[l];
        if (ka.dim(0) != kb.dim(0) || ka.dim(2) != kb.dim(2)) {
            throw ShapeError("combine: layer " + std::to_string(l) + " shape mismatch " +
                             shape_str(ka.shape()) + " vs " + shape_str(kb.shape()));
        }
        const int nh = ka.dim(0);
        std::vector<Tensor> kh(static_cast<std::size_t>(nh));
        std::vector<Tensor> vh(static_cast<std::size_t>(nh));
        for (int i = 0; i < nh; ++i) {
            kh[static_cast<std::size_t>(i)] =
                concat_rows(slice_first(ka, i), slice_first(kb, i));
            vh[static_cast<std::size_t>(i)] =
                concat_rows(slice_first(knowledge.values[l], i), slice_first(context.values[l], i));
        }
        out.keys.push_back(stack_first(kh));
        out.values.push_back(stack_first(vh));
    }
    return out;
}

}  // namespace kesconv
