#include <CLI11.hpp>
#include <Eigen/Core>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "lpa/accounting.hpp"
#include "lpa/checkpoint.hpp"
#include "lpa/experiment.hpp"
#include "lpa/training.hpp"
#include "lpa/verify.hpp"

namespace {

using namespace lpa;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitTraining = 3;

struct ModelSource {
    std::string preset;
    std::string config;

    void add_to(CLI::App* cmd) {
        auto* p = cmd->add_option("--preset", preset, "Compiled-in preset name");
        auto* c = cmd->add_option("--config", config, "Experiment config file");
        p->excludes(c);
    }
    bool given() const { return !preset.empty() || !config.empty(); }
    ExperimentConfig experiment() const {
        if (!config.empty()) {
            return load_experiment(config);
        }
        ExperimentConfig e = default_experiment();
        if (!preset.empty()) {
            e.model = preset_or_throw();
        }
        return e;
    }
    ModelConfig model() const {
        if (!given()) {
            throw ConfigError("one of --preset or --config is required");
        }
        return experiment().model;
    }

private:
    ModelConfig preset_or_throw() const { return lpa::preset(preset); }
};

std::string with_commas(std::uint64_t n) {
    std::string s = std::to_string(n);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) {
        s.insert(static_cast<std::size_t>(i), ",");
    }
    return s;
}

std::string human(std::uint64_t n) {
    return n >= 1'000'000'000 ? format_billions(n) : format_millions(n);
}

void print_count(const std::string& label, const ModelConfig& cfg, const AccountingReport& r,
                 const std::string& format) {
    if (format == "records") {
        nlohmann::ordered_json j;
        j["model"] = label;
        j["embeddings"] = r.embeddings;
        j["attention"] = r.attention;
        j["ffn"] = r.ffn;
        j["norms"] = r.norms;
        j["output_head"] = r.output_head;
        j["total"] = r.total;
        j["dense_baseline_total"] = r.dense_baseline_total;
        j["savings_vs_dense"] = r.savings_vs_dense;
        j["seq_len"] = r.seq_len;
        j["attention_flops_per_sequence"] = r.attention_flops_per_sequence;
        j["attention_flops_per_token"] = r.attention_flops_per_token;
        j["dense_attention_flops_per_sequence"] = r.dense_attention_flops_per_sequence;
        std::cout << j.dump() << "\n";
        return;
    }
    auto row = [](const std::string& k, const std::string& v) {
        std::printf("%-40s %s\n", k.c_str(), v.c_str());
    };
    row("model", label);
    row("placement", to_string(cfg.placement.mode) +
                         (cfg.placement.mode == PlacementMode::none
                              ? std::string()
                              : " r=" + std::to_string(cfg.placement.r) + " sublayers=" +
                                    cfg.placement.attn_sublayers.to_string()));
    row("embeddings", with_commas(r.embeddings));
    row("attention", with_commas(r.attention));
    row("ffn", with_commas(r.ffn));
    row("norms", with_commas(r.norms));
    row("output_head", with_commas(r.output_head));
    row("total", with_commas(r.total) + " (" + human(r.total) + ")");
    row("dense_baseline_total", with_commas(r.dense_baseline_total) + " (" +
                                    human(r.dense_baseline_total) + ")");
    const std::uint64_t saved = r.savings_vs_dense < 0 ? 0 : r.savings_vs_dense;
    row("savings_vs_dense", (r.savings_vs_dense < 0 ? "-" : "") +
                                with_commas(r.savings_vs_dense < 0 ? -r.savings_vs_dense : saved) +
                                " (" + human(saved) + ")");
    row("attention_flops_per_sequence(L=" + std::to_string(r.seq_len) + ")",
        with_commas(r.attention_flops_per_sequence));
    row("dense_attention_flops_per_sequence", with_commas(r.dense_attention_flops_per_sequence));
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) {
            seeds.push_back(parse_size("seeds", item));
        }
    }
    if (seeds.empty()) {
        throw ConfigError("--seeds needs at least one seed");
    }
    return seeds;
}

void configure_threads() {
    if (const char* env = std::getenv("LPA_THREADS")) {
        const auto n = parse_size("LPA_THREADS", env);
        if (n == 0) {
            throw ConfigError("LPA_THREADS must be positive");
        }
        Eigen::setNbThreads(static_cast<int>(n));
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-dimensional projected attention: accounting, training and checks"};
    app.require_subcommand(1);

    ModelSource count_src;
    std::string count_format = "table";
    std::size_t count_seq = 0;
    auto* count = app.add_subcommand("count", "Parameter and attention FLOP accounting");
    count_src.add_to(count);
    count->add_option("--format", count_format)->check(CLI::IsMember({"table", "records"}));
    count->add_option("--seq-len", count_seq, "Sequence length for FLOPs (default max_seq_len)");

    ModelSource flops_src;
    std::size_t flops_seq = 0;
    std::size_t flops_din = 0;
    std::size_t flops_dout = 0;
    std::size_t flops_r = 0;
    auto* flops = app.add_subcommand("flops", "Attention FLOPs per layer and per model");
    flops_src.add_to(flops);
    flops->add_option("--seq-len", flops_seq, "Sequence length L")->required();
    flops->add_option("--d-in", flops_din, "Single-layer mode: input width");
    flops->add_option("--d-out", flops_dout, "Single-layer mode: output width");
    flops->add_option("--r", flops_r, "Single-layer mode: factor rank (0 = dense)");

    std::string train_config;
    std::string train_preset;
    std::string train_corpus;
    std::string train_out;
    std::optional<std::uint64_t> train_seed;
    std::optional<std::size_t> train_steps;
    auto* trn = app.add_subcommand("train", "Train a model and write metrics and checkpoints");
    auto* tc = trn->add_option("--config", train_config, "Experiment config file");
    trn->add_option("--preset", train_preset, "Model preset (with --corpus)")->excludes(tc);
    trn->add_option("--corpus", train_corpus, "Corpus file or directory (overrides the config)");
    trn->add_option("--seed", train_seed, "Seed for initialization");
    trn->add_option("--steps", train_steps, "Override total_steps");
    trn->add_option("--out", train_out, "Output directory")->required();

    std::string eval_ckpt;
    std::string eval_data;
    std::size_t eval_seq = 128;
    std::size_t eval_windows = 0;
    auto* evl = app.add_subcommand("eval", "Perplexity of a checkpoint on a byte file");
    evl->add_option("--checkpoint", eval_ckpt)->required();
    evl->add_option("--data", eval_data, "File or directory scored in full")->required();
    evl->add_option("--seq-len", eval_seq);
    evl->add_option("--max-windows", eval_windows);

    std::string seeds_config;
    std::string seeds_list = "1,2,3";
    std::string seeds_out;
    std::optional<std::size_t> seeds_steps;
    auto* sds = app.add_subcommand("seeds", "Train and evaluate once per seed; report mean±std");
    sds->add_option("--config", seeds_config)->required();
    sds->add_option("--seeds", seeds_list, "Comma-separated seeds");
    sds->add_option("--out", seeds_out, "Directory for per-seed outputs");
    sds->add_option("--steps", seeds_steps, "Override total_steps");

    std::string verify_suite = "all";
    VerifyOptions verify_opts;
    std::optional<double> verify_acc_tol;
    auto* vfy = app.add_subcommand("verify", "Run self-check suites");
    vfy->add_option("--suite", verify_suite)
        ->check(CLI::IsMember({"grad", "jacobian", "equivalence", "accounting", "all"}));
    vfy->add_option("--grad-tol", verify_opts.grad_tol);
    vfy->add_option("--equivalence-tol", verify_opts.equivalence_tol);
    vfy->add_option("--accounting-tol", verify_acc_tol, "Absolute parameter tolerance override");
    vfy->add_option("--seed", verify_opts.seed);

    ModelSource alloc_src;
    std::uint64_t alloc_target = 0;
    std::string alloc_target_preset;
    std::string alloc_strategy;
    std::string alloc_out;
    auto* alc = app.add_subcommand("allocate", "Spend a parameter surplus on one dimension");
    alloc_src.add_to(alc);
    auto* at = alc->add_option("--target-params", alloc_target, "Target total parameters");
    alc->add_option("--target-preset", alloc_target_preset, "Use this preset's total as target")
        ->excludes(at);
    alc->add_option("--strategy", alloc_strategy)
        ->required()
        ->check(CLI::IsMember({"attn_dim", "ffn_dim", "layer_num"}));
    alc->add_option("--out", alloc_out, "Write the config here instead of stdout");

    std::string bench_preset;
    std::size_t bench_seq = 0;
    std::size_t bench_repeats = 5;
    std::size_t bench_r = 0;
    auto* bch = app.add_subcommand("bench", "Forward-pass timing and counted FLOPs");
    bch->add_option("--preset", bench_preset)->required();
    bch->add_option("--seq-len", bench_seq, "Sequence length (default max_seq_len)");
    bch->add_option("--repeats", bench_repeats);
    bch->add_option("--r", bench_r, "Add a full-attention factored row with this rank");

    std::string gen_ckpt;
    std::string gen_prompt;
    std::size_t gen_tokens = 64;
    double gen_temperature = 0.0;
    std::uint64_t gen_seed = 1;
    auto* gen = app.add_subcommand("generate", "Continue a byte prompt from a checkpoint");
    gen->add_option("--checkpoint", gen_ckpt)->required();
    gen->add_option("--prompt", gen_prompt)->required();
    gen->add_option("--tokens", gen_tokens);
    gen->add_option("--temperature", gen_temperature);
    gen->add_option("--seed", gen_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        configure_threads();

        if (count->parsed()) {
            const ModelConfig cfg = count_src.model();
            const std::string label = count_src.preset.empty() ? count_src.config : count_src.preset;
            print_count(label, cfg, count_params(cfg, count_seq), count_format);
            return kExitOk;
        }

        if (flops->parsed()) {
            if (flops_seq == 0) {
                throw ConfigError("--seq-len must be positive");
            }
            if (flops_din > 0 || flops_dout > 0) {
                if (flops_din == 0 || flops_dout == 0) {
                    throw ConfigError("single-layer mode needs both --d-in and --d-out");
                }
                std::optional<std::size_t> r;
                if (flops_r > 0) {
                    r = flops_r;
                }
                std::printf("%-10s %-8s %-8s %-8s %s\n", "L", "d_in", "d_out", "r", "flops");
                std::printf("%-10zu %-8zu %-8zu %-8s %s\n", flops_seq, flops_din, flops_dout,
                            r ? std::to_string(*r).c_str() : "dense",
                            with_commas(count_attention_flops(flops_din, flops_dout, r,
                                                              flops_seq))
                                .c_str());
                return kExitOk;
            }
            const ModelConfig cfg = flops_src.model();
            ModelConfig dense = cfg;
            dense.placement = PlacementSpec{};
            const auto m = attention_macs(cfg, flops_seq);
            const auto md = attention_macs(dense, flops_seq);
            std::printf("%-28s %s\n", "seq_len", std::to_string(flops_seq).c_str());
            std::printf("%-28s %s\n", "layer_flops", with_commas(m.closed_form_flops()).c_str());
            std::printf("%-28s %s\n", "layer_flops_dense",
                        with_commas(md.closed_form_flops()).c_str());
            std::printf("%-28s %s\n", "model_flops",
                        with_commas(cfg.layer_count * m.closed_form_flops()).c_str());
            std::printf("%-28s %s\n", "model_flops_dense",
                        with_commas(cfg.layer_count * md.closed_form_flops()).c_str());
            std::printf("%-28s %.6f\n", "ratio",
                        static_cast<double>(m.closed_form_flops()) /
                            static_cast<double>(md.closed_form_flops()));
            return kExitOk;
        }

        if (trn->parsed()) {
            ExperimentConfig e = default_experiment();
            if (!train_config.empty()) {
                e = load_experiment(train_config);
            } else if (!train_preset.empty()) {
                e.model = preset(train_preset);
            }
            if (!train_corpus.empty()) {
                e.data.corpus = train_corpus;
            }
            if (e.data.corpus.empty()) {
                throw ConfigError("no corpus given (set [data] corpus or --corpus)");
            }
            if (train_seed) {
                e.train.seed = *train_seed;
            }
            if (train_steps) {
                e.train.total_steps = *train_steps;
            }
            e.train.validate();
            const Corpus corpus = load_corpus(e.data.corpus, e.data.fractions);
            std::filesystem::create_directories(train_out);
            save_experiment(e, std::filesystem::path(train_out) / "experiment.cfg");
            const Model init = build_model(e.model, e.train.seed);
            try {
                const TrainResult r =
                    train(init, corpus, e.train, TrainOptions{std::filesystem::path(train_out)});
                const auto& last = r.metrics.back();
                std::printf("steps %zu  initial_loss %.4f  final_loss %.4f", last.step,
                            r.metrics.front().train_loss, last.train_loss);
                if (last.eval_ppl) {
                    std::printf("  valid_ppl %.3f", *last.eval_ppl);
                }
                std::printf("\n");
            } catch (const TrainingError& err) {
                std::fprintf(stderr, "training failed: %s\n", err.what());
                return kExitTraining;
            }
            return kExitOk;
        }

        if (evl->parsed()) {
            const Model model = load_checkpoint(eval_ckpt);
            const Corpus all = load_corpus(eval_data, SplitFractions{1.0, 0.0, 0.0});
            const EvalResult r = evaluate_ppl(model, all.train, eval_seq, eval_windows);
            nlohmann::ordered_json j;
            j["nll"] = r.nll;
            j["ppl"] = r.ppl;
            j["tokens"] = r.tokens;
            std::cout << j.dump() << "\n";
            return kExitOk;
        }

        if (sds->parsed()) {
            ExperimentConfig e = load_experiment(seeds_config);
            if (seeds_steps) {
                e.train.total_steps = *seeds_steps;
            }
            if (e.data.corpus.empty()) {
                throw ConfigError("the config has no [data] corpus");
            }
            const auto seeds = parse_seed_list(seeds_list);
            std::optional<std::filesystem::path> out;
            if (!seeds_out.empty()) {
                out = seeds_out;
            }
            try {
                const SeedReport rep = run_seeds(e, seeds, out);
                for (const auto& run : rep.runs) {
                    nlohmann::ordered_json j;
                    j["seed"] = run.seed;
                    j["initial_train_loss"] = run.initial_train_loss;
                    j["final_train_loss"] = run.final_train_loss;
                    j["test_nll"] = run.test_nll;
                    j["test_ppl"] = run.test_ppl;
                    std::cout << j.dump() << "\n";
                }
                std::printf("test_ppl %s (n=%zu%s)\n",
                            format_mean_std(rep.mean_ppl, rep.std_ppl).c_str(), rep.runs.size(),
                            rep.single_seed ? ", single seed: std not estimable" : "");
            } catch (const TrainingError& err) {
                std::fprintf(stderr, "training failed: %s\n", err.what());
                return kExitTraining;
            }
            return kExitOk;
        }

        if (vfy->parsed()) {
            verify_opts.accounting_tol = verify_acc_tol;
            const auto results = run_suite(parse_suite(verify_suite), verify_opts);
            std::size_t failed = 0;
            for (const auto& r : results) {
                std::cout << render_check_line(r) << "\n";
                failed += !r.passed;
            }
            std::printf("summary: %zu checks, %zu failed\n", results.size(), failed);
            if (failed > 0) {
                for (const auto& r : results) {
                    if (!r.passed) {
                        std::fprintf(stderr, "FAILED %s/%s\n", r.suite.c_str(), r.name.c_str());
                    }
                }
                return 1;
            }
            return kExitOk;
        }

        if (alc->parsed()) {
            ExperimentConfig e = alloc_src.experiment();
            if (!alloc_src.given()) {
                throw ConfigError("one of --preset or --config is required");
            }
            std::uint64_t target = alloc_target;
            if (!alloc_target_preset.empty()) {
                target = count_params(preset(alloc_target_preset)).total;
            }
            if (target == 0) {
                throw ConfigError("one of --target-params or --target-preset is required");
            }
            const Allocation a =
                allocate_surplus(e.model, target, parse_surplus_strategy(alloc_strategy));
            e.model = a.config;
            const std::string text = render_experiment(e);
            if (alloc_out.empty()) {
                std::cout << text;
            } else {
                save_experiment(e, alloc_out);
            }
            std::fprintf(stderr, "target %s achieved %s gap %s quantum %s\n",
                         with_commas(target).c_str(), with_commas(a.achieved_total).c_str(),
                         with_commas(target - a.achieved_total).c_str(),
                         with_commas(a.quantum_cost).c_str());
            return kExitOk;
        }

        if (bch->parsed()) {
            const ModelConfig cfg = preset(bench_preset);
            const std::size_t L = bench_seq == 0 ? cfg.max_seq_len : bench_seq;
            std::vector<std::pair<std::string, ModelConfig>> rows;
            ModelConfig dense = cfg;
            dense.placement = PlacementSpec{};
            rows.push_back({"dense", dense});
            if (cfg.placement.mode != PlacementMode::none) {
                rows.push_back({bench_preset, cfg});
            }
            if (bench_r > 0) {
                ModelConfig low = dense;
                low.placement = {PlacementMode::attn, SublayerSet::all(), bench_r};
                rows.push_back({"lpa-r" + std::to_string(bench_r), low});
            }
            std::printf("%-22s %-8s %-8s %-14s %-20s %-20s %s\n", "model", "L", "repeats", "median_ms",
                        "attn_flops_counted", "attn_flops_formula", "note");
            for (const auto& [name, c] : rows) {
                const Model m = build_model(c, 1);
                const BenchResult b = bench_eval(m, L, bench_repeats);
                const std::uint64_t counted =
                    2 * b.attention_projection_macs + b.attention_core_macs;
                const std::uint64_t formula = attention_macs(c, L).closed_form_flops();
                std::printf("%-22s %-8zu %-8zu %-14.3f %-20s %-20s %s\n", name.c_str(), L,
                            b.samples_ms.size(), b.median_ms,
                            with_commas(counted / c.layer_count).c_str(),
                            with_commas(formula).c_str(),
                            b.low_confidence ? "single measurement (low confidence)" : "");
            }
            return kExitOk;
        }

        if (gen->parsed()) {
            const Model model = load_checkpoint(gen_ckpt);
            const auto prompt = ByteTokenizer::encode(gen_prompt);
            const auto out = model.generate(prompt, gen_tokens, gen_temperature, gen_seed);
            std::cout << ByteTokenizer::decode(out) << "\n";
            return kExitOk;
        }
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "training failed: %s\n", e.what());
        return kExitTraining;
    } catch (const lpa::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return kExitUsage;
}
