// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 data error, 4 numerical failure.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kesconv/pipeline.hpp"

namespace {

struct CommonFlags {
    std::string config;
    int seed = -1;  // -1 = keep config value
    std::string dialogues, kb, vocab, index_dir, ckpt_dir;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "config file (flat JSON or key=value lines)");
    cmd->add_option("--seed", f.seed, "override the config seed");
    cmd->add_option("--dialogues", f.dialogues, "override dialogues path");
    cmd->add_option("--kb", f.kb, "override knowledge base path");
    cmd->add_option("--vocab", f.vocab, "override vocabulary path");
    cmd->add_option("--index-dir", f.index_dir, "override index directory");
    cmd->add_option("--ckpt-dir", f.ckpt_dir, "override checkpoint directory");
}

kesconv::RunConfig resolve(const CommonFlags& f) {
    kesconv::RunConfig cfg = f.config.empty() ? kesconv::RunConfig{}
                                              : kesconv::RunConfig::from_file(f.config);
    if (f.seed >= 0) {
        cfg.seed = f.seed;
    }
    if (!f.dialogues.empty()) {
        cfg.dialogues = f.dialogues;
    }
    if (!f.kb.empty()) {
        cfg.kb = f.kb;
    }
    if (!f.vocab.empty()) {
        cfg.vocab = f.vocab;
    }
    if (!f.index_dir.empty()) {
        cfg.index_dir = f.index_dir;
    }
    if (!f.ckpt_dir.empty()) {
        cfg.ckpt_dir = f.ckpt_dir;
    }
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge-grounded dialogue response generation"};
    app.require_subcommand(1);

    CommonFlags synth_f, vocab_f, index_f, train_f, gen_f, eval_f, sweep_f;

    auto* synth = app.add_subcommand("synth", "generate the synthetic corpus");
    int n_dialogues = 64, kb_size = 64;
    std::string synth_out = ".";
    add_common(synth, synth_f);
    synth->add_option("--n-dialogues", n_dialogues, "number of dialogues")->check(CLI::PositiveNumber);
    synth->add_option("--kb-size", kb_size, "number of QA entries")->check(CLI::PositiveNumber);
    synth->add_option("--out", synth_out, "output directory");

    auto* build_vocab = app.add_subcommand("build-vocab", "build the frequency-ordered vocabulary");
    std::string vocab_out;
    add_common(build_vocab, vocab_f);
    build_vocab->add_option("--out", vocab_out, "vocabulary output path");

    auto* index = app.add_subcommand("index", "embed the knowledge base");
    std::string index_out;
    add_common(index, index_f);
    index->add_option("--out", index_out, "index output directory");

    auto* train = app.add_subcommand("train", "train prompt encoders (or the baseline)");
    std::string train_out;
    add_common(train, train_f);
    train->add_option("--out", train_out, "checkpoint output directory");

    auto* generate = app.add_subcommand("generate", "decode responses for dialogues");
    std::string gen_out = "generations.jsonl";
    add_common(generate, gen_f);
    generate->add_option("--out", gen_out, "generations output path");

    auto* evaluate = app.add_subcommand("evaluate", "score generations against references");
    std::string eval_generations, eval_out;
    add_common(evaluate, eval_f);
    evaluate->add_option("--generations", eval_generations, "generations JSONL")->required();
    evaluate->add_option("--out", eval_out, "metrics JSON output path");

    auto* sweep = app.add_subcommand("sweep", "prompt-size sweep");
    std::string sweep_axis = "knowledge", sweep_out = "sweep";
    std::vector<int> sweep_values;
    add_common(sweep, sweep_f);
    sweep->add_option("--axis", sweep_axis, "knowledge or context");
    sweep->add_option("--values", sweep_values, "prompt sizes to try")->delimiter(',');
    sweep->add_option("--out", sweep_out, "sweep output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            kesconv::RunConfig cfg = resolve(synth_f);
            const std::string dlg = cfg.dialogues.empty()
                                        ? synth_out + "/dialogues.jsonl"
                                        : cfg.dialogues;
            const std::string kb = cfg.kb.empty() ? synth_out + "/kb.jsonl" : cfg.kb;
            kesconv::cmd_synth(static_cast<uint64_t>(cfg.seed), n_dialogues, kb_size, dlg, kb);
            std::cout << "wrote " << dlg << " and " << kb << "\n";
        } else if (build_vocab->parsed()) {
            kesconv::RunConfig cfg = resolve(vocab_f);
            const std::string out = !vocab_out.empty() ? vocab_out : cfg.vocab;
            if (out.empty()) {
                throw kesconv::ConfigError("build-vocab needs --out or config key 'vocab'");
            }
            kesconv::cmd_build_vocab(cfg, out);
            std::cout << "wrote " << out << "\n";
        } else if (index->parsed()) {
            kesconv::RunConfig cfg = resolve(index_f);
            if (!index_out.empty()) {
                cfg.index_dir = index_out;
            }
            kesconv::cmd_index(cfg);
            std::cout << "wrote index to " << cfg.index_dir << "\n";
        } else if (train->parsed()) {
            kesconv::RunConfig cfg = resolve(train_f);
            if (!train_out.empty()) {
                cfg.ckpt_dir = train_out;
            }
            const kesconv::TrainResult r = kesconv::cmd_train(cfg);
            std::cout << "trained " << r.trace.size() << " steps, final loss " << r.final_loss
                      << "; checkpoint in " << cfg.ckpt_dir << "\n";
        } else if (generate->parsed()) {
            kesconv::RunConfig cfg = resolve(gen_f);
            const auto rows = kesconv::cmd_generate(cfg, gen_out);
            std::cout << "wrote " << rows.size() << " generations to " << gen_out << "\n";
        } else if (evaluate->parsed()) {
            kesconv::RunConfig cfg = resolve(eval_f);
            const kesconv::MetricsReport rep =
                kesconv::cmd_evaluate(cfg, eval_generations, eval_out);
            std::cout << rep.to_table();
            if (!eval_out.empty()) {
                std::cout << "wrote " << eval_out << "\n";
            }
        } else if (sweep->parsed()) {
            kesconv::RunConfig cfg = resolve(sweep_f);
            if (sweep_values.empty()) {
                sweep_values = {1, 5, 10, 15, 20};
            }
            const kesconv::SweepReport rep =
                kesconv::cmd_sweep(cfg, sweep_axis, sweep_values, sweep_out);
            std::cout << rep.to_csv();
        }
    } catch (const kesconv::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const kesconv::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const kesconv::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
