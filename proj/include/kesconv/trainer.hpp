// SPDX-License-Identifier: Apache-2.0
//
// Loss computation and the optimization loop.
//
// The decoder input is [seed ; response] where the seed depends on the mode
// (system.decode_seed); cross-entropy covers exactly the response tokens.
// AdamW follows the reference semantics: decoupled weight decay, bias
// correction with a per-parameter step count, and parameters that received
// no gradient this step are skipped untouched. Weight decay applies only to
// weight matrices and embedding tables (names ending in _w/w1/w2/emb), never
// to biases or layer-norm gains.
//
// Optimizer steps are 1-based: step k of total_steps uses lr_at(k), so the
// first update is nonzero and the peak lands exactly at the end of warmup.

#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "kesconv/common.hpp"
#include "kesconv/config.hpp"
#include "kesconv/corpus.hpp"
#include "kesconv/system.hpp"
#include "kesconv/tensor.hpp"
#include "kesconv/vocab.hpp"

namespace kesconv {

struct TrainSchedule {
    double lr = 5e-5;
    int warmup_steps = 200;
    int total_steps = 1000;

    static TrainSchedule from_run(const RunConfig& rc) {
        return {rc.lr, rc.warmup_steps, rc.total_steps};
    }
};

// Linear warmup to `lr` at warmup_steps, then linear decay to 0 at
// total_steps.
inline double lr_at(int step, const TrainSchedule& s) {
    if (step < 0 || step > s.total_steps) {
        throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(s.total_steps) + "]");
    }
    if (step < s.warmup_steps) {
        return s.lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    }
    return s.lr * static_cast<double>(s.total_steps - step) /
           static_cast<double>(s.total_steps - s.warmup_steps);
}

inline bool weight_decay_applies(const std::string& name) {
    auto ends_with = [&](const char* suf) {
        const std::size_t n = std::string(suf).size();
        return name.size() >= n && name.compare(name.size() - n, n, suf) == 0;
    };
    return ends_with("_w") || ends_with("w1") || ends_with("w2") || ends_with("emb");
}

class AdamW {
public:
    AdamW(double beta1, double beta2, double eps, double weight_decay, double clip_norm)
        : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay), clip_(clip_norm) {}

    static AdamW from_run(const RunConfig& rc) {
        return AdamW(rc.adam_beta1, rc.adam_beta2, rc.adam_eps, rc.weight_decay, rc.clip_norm);
    }

    // One update over the store's trainable parameters at the given learning
    // rate. Gradients are first clipped to global norm `clip_norm` across all
    // participating parameters.
    void step(ParamStore& store, double lr) {
        const auto names = store.trainable_names();
        double sq = 0.0;
        for (const auto& n : names) {
            Tensor& p = store.get(n);
            if (!p.has_grad()) {
                continue;
            }
            for (double g : p.grad()) {
                sq += g * g;
            }
        }
        const double norm = std::sqrt(sq);
        const double gscale = norm > clip_ ? clip_ / norm : 1.0;

        for (const auto& n : names) {
            Tensor& p = store.get(n);
            if (!p.has_grad()) {
                continue;
            }
            State& st = state_[n];
            if (st.m.empty()) {
                st.m.assign(p.data().size(), 0.0);
                st.v.assign(p.data().size(), 0.0);
            }
            ++st.t;
            const double bc1 = 1.0 - std::pow(b1_, st.t);
            const double bc2 = 1.0 - std::pow(b2_, st.t);
            const bool decay = wd_ > 0.0 && weight_decay_applies(n);
            auto& w = p.data();
            const auto& grad = p.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double g = grad[i] * gscale;
                st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g;
                st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * g * g;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
                if (decay) {
                    w[i] -= lr * wd_ * w[i];
                }
            }
        }
    }

private:
    struct State {
        long long t = 0;
        std::vector<double> m;
        std::vector<double> v;
    };

    double b1_, b2_, eps_, wd_, clip_;
    std::unordered_map<std::string, State> state_;
};

enum class LossVariant {
    kDefault,         // mode-dictated past
    kEmptyKnowledge,  // knowledge past forced empty (ablation probe)
};

// Scalar mean cross-entropy over the response tokens of one example.
inline Tensor compute_loss(KesconvSystem& sys, const Vocab& vocab, const TrainExample& ex,
                           LossVariant variant = LossVariant::kDefault) {
    if (ex.response.empty()) {
        throw DataError("example for dialogue '" + ex.context.dialogue_id +
                        "' has an empty response");
    }
    const std::vector<int> context_ids = sys.encode_context(ex.context, vocab);
    std::vector<int> knowledge_ids;
    if (sys.run_config().mode != "no_knowledge" && variant == LossVariant::kDefault) {
        knowledge_ids = sys.encode_knowledge(ex.knowledge, vocab);
    }

    std::vector<int> seed = sys.decode_seed(knowledge_ids, context_ids);
    std::vector<int> input = seed;
    input.insert(input.end(), ex.response.begin(), ex.response.end());

    PastState past;
    if (!sys.baseline()) {
        if (variant == LossVariant::kEmptyKnowledge) {
            past = combine(PastState{}, sys.cpe().encode(context_ids));
        } else {
            past = sys.build_past(knowledge_ids, context_ids);
        }
    }
    const int budget = sys.lm_config().max_positions - past.p;
    if (static_cast<int>(input.size()) > budget) {
        throw DataError("dialogue '" + ex.context.dialogue_id + "': sequence of " +
                        std::to_string(input.size()) + " tokens (response " +
                        std::to_string(ex.response.size()) +
                        ") exceeds the position budget of " + std::to_string(budget));
    }

    auto [logits, np] = sys.rgd().forward(input, sys.baseline() ? nullptr : &past);

    const int n = static_cast<int>(input.size());
    const int seed_len = static_cast<int>(seed.size());
    std::vector<int> targets(static_cast<std::size_t>(n), 0);
    std::vector<int> mask(static_cast<std::size_t>(n), 0);
    for (int j = 0; j + 1 < n; ++j) {
        targets[static_cast<std::size_t>(j)] = input[static_cast<std::size_t>(j) + 1];
        if (j + 1 >= seed_len) {
            mask[static_cast<std::size_t>(j)] = 1;  // row j predicts a response token
        }
    }
    return cross_entropy(logits, targets, mask);
}

struct TraceRow {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<TraceRow> trace;
    double final_loss = 0.0;
};

inline void write_trace_csv(const std::vector<TraceRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) {
        throw DataError("cannot write loss trace " + path);
    }
    f << "step,lr,loss\n";
    f << std::setprecision(17);
    for (const auto& r : rows) {
        f << r.step << "," << r.lr << "," << r.loss << "\n";
    }
}

// Fixed-step training loop: batches cycle through a seed-derived shuffle,
// reshuffled each epoch; one optimizer step per batch of batch_size examples
// (mean loss). Aborts with step number and the batch's dialogue ids if the
// loss goes non-finite.
inline TrainResult train(KesconvSystem& sys, const Vocab& vocab,
                         const std::vector<TrainExample>& examples,
                         const std::string& trace_path = "") {
    if (examples.empty()) {
        throw DataError("training set is empty");
    }
    const RunConfig& rc = sys.run_config();
    const TrainSchedule sched = TrainSchedule::from_run(rc);
    AdamW opt = AdamW::from_run(rc);
    Rng shuffle_rng = Rng(static_cast<uint64_t>(rc.seed)).stream(0xB2);

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    shuffle_rng.shuffle(order);
    std::size_t cursor = 0;

    TrainResult result;
    result.trace.reserve(static_cast<std::size_t>(rc.total_steps));
    for (int step = 1; step <= rc.total_steps; ++step) {
        std::vector<std::size_t> batch;
        for (int b = 0; b < rc.batch_size; ++b) {
            if (cursor == order.size()) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }

        sys.store().zero_grads();
        Tensor loss;
        for (std::size_t bi = 0; bi < batch.size(); ++bi) {
            Tensor li = compute_loss(sys, vocab, examples[batch[bi]]);
            loss = bi == 0 ? li : add(loss, li);
        }
        loss = scale(loss, 1.0 / static_cast<double>(batch.size()));

        const double lval = loss.item();
        if (!std::isfinite(lval)) {
            std::string ids;
            for (std::size_t bi : batch) {
                ids += (ids.empty() ? "" : ", ") + examples[bi].context.dialogue_id;
            }
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               " (batch dialogues: " + ids + ")");
        }
        backward(loss);

        const double lr = lr_at(step, sched);
        opt.step(sys.store(), lr);
        result.trace.push_back({step, lr, lval});
    }
    result.final_loss = result.trace.empty() ? 0.0 : result.trace.back().loss;
    if (!trace_path.empty()) {
        write_trace_csv(result.trace, trace_path);
    }
    return result;
}

// Mean per-example loss without building a tape (evaluation probe).
inline double eval_mean_loss(KesconvSystem& sys, const Vocab& vocab,
                             const std::vector<TrainExample>& examples,
                             LossVariant variant = LossVariant::kDefault) {
    if (examples.empty()) {
        throw DataError("no examples to evaluate");
    }
    NoGradGuard ng;
    double acc = 0.0;
    for (const auto& ex : examples) {
        acc += compute_loss(sys, vocab, ex, variant).item();
    }
    return acc / static_cast<double>(examples.size());
}

}  // namespace kesconv
