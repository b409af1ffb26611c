// SPDX-License-Identifier: Apache-2.0
//
// The full response-generation system: a frozen decoder (RGD) plus the two
// trainable prompt encoders (KPE for retrieved knowledge, CPE for dialogue
// context), all instantiated from one shared random init standing in for a
// shared pretrained backbone.
//
// Construction is deterministic given (config, vocabulary): parameters are
// drawn from a seed-derived stream with the decoder's token embeddings drawn
// first, which is what lets the retriever reproduce identical embeddings
// across commands from config + seed alone.
//
// Modes: kesconv (prompts injected as past state, RGD frozen), no_knowledge
// (same but the knowledge past is empty), concat_baseline (no prompt
// encoders at all; knowledge and context are concatenated into the input and
// the whole decoder trains).

#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kesconv/common.hpp"
#include "kesconv/config.hpp"
#include "kesconv/corpus.hpp"
#include "kesconv/lm.hpp"
#include "kesconv/param_store.hpp"
#include "kesconv/prompt.hpp"
#include "kesconv/tensor.hpp"
#include "kesconv/vocab.hpp"

namespace kesconv {

inline constexpr const char* kVersionString = "kesconv-0.1.0";

class KesconvSystem {
public:
    KesconvSystem(RunConfig rc, const Vocab& vocab) : rc_(std::move(rc)) {
        rc_.validate();
        lm_cfg_ = LMConfig::from_run(rc_);
        lm_cfg_.vocab_size = vocab.size();  // actual vocabulary, not the build cap
        lm_cfg_.validate();

        Rng param_rng = Rng(static_cast<uint64_t>(rc_.seed)).stream(0xA1);
        MiniLM::create_params(lm_cfg_, store_, "rgd.", param_rng);
        rgd_ = std::make_unique<MiniLM>(lm_cfg_, store_, "rgd.");

        if (rc_.mode != "concat_baseline") {
            copy_backbone("kpe.");
            PromptEncoder::create_params(lm_cfg_, store_, "kpe.", rc_.knowledge_prompt_len,
                                         store_.get("rgd.tok_emb"), param_rng);
            copy_backbone("cpe.");
            PromptEncoder::create_params(lm_cfg_, store_, "cpe.", rc_.context_prompt_len,
                                         store_.get("rgd.tok_emb"), param_rng);
            kpe_ = std::make_unique<PromptEncoder>(lm_cfg_, store_, "kpe.",
                                                   rc_.knowledge_prompt_len,
                                                   rc_.knowledge_truncate, Truncate::kRight);
            cpe_ = std::make_unique<PromptEncoder>(lm_cfg_, store_, "cpe.",
                                                   rc_.context_prompt_len, rc_.context_truncate,
                                                   Truncate::kLeft);
            for (const auto& name : store_.names()) {
                if (name.rfind("rgd.", 0) == 0) {
                    store_.freeze(name);
                }
            }
        }
    }

    KesconvSystem(const KesconvSystem&) = delete;
    KesconvSystem& operator=(const KesconvSystem&) = delete;

    const RunConfig& run_config() const { return rc_; }
    const LMConfig& lm_config() const { return lm_cfg_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    bool baseline() const { return rc_.mode == "concat_baseline"; }

    MiniLM& rgd() { return *rgd_; }
    const MiniLM& rgd() const { return *rgd_; }

    PromptEncoder& kpe() {
        require_encoders();
        return *kpe_;
    }
    PromptEncoder& cpe() {
        require_encoders();
        return *cpe_;
    }
    const PromptEncoder& kpe() const {
        require_encoders();
        return *kpe_;
    }
    const PromptEncoder& cpe() const {
        require_encoders();
        return *cpe_;
    }

    uint64_t rgd_hash() const { return store_.hash_prefix("rgd."); }

    // Context ids: utterances joined by SEP, left-truncated to the context
    // budget (oldest tokens dropped). The decoder sees the same window the
    // context encoder does.
    std::vector<int> encode_context(const DialogueContext& ctx, const Vocab& vocab) const {
        std::vector<int> ids = vocab.encode(ctx.query_text());
        const std::size_t lim = static_cast<std::size_t>(rc_.context_truncate);
        if (ids.size() > lim) {
            ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(lim));
        }
        return ids;
    }

    // Knowledge ids: the retrieved answer, right-truncated.
    std::vector<int> encode_knowledge(const QAEntry& entry, const Vocab& vocab) const {
        std::vector<int> ids = vocab.encode(entry.answer);
        const std::size_t lim = static_cast<std::size_t>(rc_.knowledge_truncate);
        if (ids.size() > lim) {
            ids.resize(lim);
        }
        return ids;
    }

    // The injected past for the current mode. Baseline mode has no past.
    PastState build_past(const std::vector<int>& knowledge_ids,
                         const std::vector<int>& context_ids) const {
        require_encoders();
        PastState ctx_past = cpe_->encode(context_ids);
        if (rc_.mode == "no_knowledge") {
            return combine(PastState{}, ctx_past);
        }
        return combine(kpe_->encode(knowledge_ids), ctx_past);
    }

    // Decoder-side token seed preceding the response, per mode:
    //   kesconv / no_knowledge: [context ; BOS] (knowledge only via the past)
    //   concat_baseline:        [knowledge ; SEP ; context ; BOS]
    std::vector<int> decode_seed(const std::vector<int>& knowledge_ids,
                                 const std::vector<int>& context_ids) const {
        std::vector<int> seed;
        if (baseline()) {
            seed = knowledge_ids;
            seed.push_back(Vocab::kSep);
            seed.insert(seed.end(), context_ids.begin(), context_ids.end());
        } else {
            seed = context_ids;
        }
        seed.push_back(Vocab::kBos);
        return seed;
    }

    void save(const std::filesystem::path& dir) const { store_.save(dir); }
    void load(const std::filesystem::path& dir) { store_.load(dir); }

private:
    void copy_backbone(const std::string& prefix) {
        std::vector<std::string> rgd_names;
        for (const auto& name : store_.names()) {
            if (name.rfind("rgd.", 0) == 0) {
                rgd_names.push_back(name);
            }
        }
        for (const auto& name : rgd_names) {
            store_.add(prefix + name.substr(4), store_.get(name).clone(/*requires_grad=*/true));
        }
    }

    void require_encoders() const {
        if (!kpe_ || !cpe_) {
            throw ConfigError("prompt encoders are not built in concat_baseline mode");
        }
    }

    RunConfig rc_;
    LMConfig lm_cfg_;
    ParamStore store_;
    std::unique_ptr<MiniLM> rgd_;
    std::unique_ptr<PromptEncoder> kpe_;
    std::unique_ptr<PromptEncoder> cpe_;
};

}  // namespace kesconv
