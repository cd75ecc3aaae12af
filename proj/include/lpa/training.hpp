#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lpa/checkpoint.hpp"
#include "lpa/model.hpp"

namespace lpa {

/// Bytes map to tokens 0..255; 256 marks the end of a document.
class ByteTokenizer {
public:
    static constexpr std::size_t vocab_size = 257;
    static constexpr TokenId sentinel = 256;

    static std::vector<TokenId> encode(std::string_view text);
    /// Sentinels are dropped; any other id outside 0..255 is an IndexError.
    static std::string decode(std::span<const TokenId> ids);
};

struct SplitFractions {
    double train = 0.9;
    double valid = 0.05;
    double test = 0.05;

    /// ConfigError unless all are non-negative and they sum to 1.
    void validate() const;
    friend bool operator==(const SplitFractions&, const SplitFractions&) = default;
};

struct Corpus {
    std::vector<TokenId> train;
    std::vector<TokenId> valid;
    std::vector<TokenId> test;
};

/// Contiguous split: train gets floor(f_train·N) tokens, valid floor(f_valid·N),
/// test the remainder.
Corpus split_tokens(const std::vector<TokenId>& stream, const SplitFractions& fractions);

/// A file is one document; a directory contributes each regular file in name
/// order. Every document is followed by the sentinel. DataError when the path
/// is unreadable or holds no bytes.
Corpus load_corpus(const std::filesystem::path& path, const SplitFractions& fractions = {});

struct TrainConfig {
    double learning_rate = 3e-3;
    double warmup_fraction = 0.01;
    double final_lr_fraction = 0.1;
    std::size_t batch_size = 16;
    std::size_t seq_len = 128;
    std::size_t total_steps = 500;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    /// 0 disables clipping.
    double grad_clip_norm = 1.0;
    std::uint64_t seed = 1;
    /// Evaluate on the validation split (and checkpoint) every N steps; 0 = at the end only.
    std::size_t eval_interval = 0;
    /// Cap on validation windows per evaluation; 0 = all.
    std::size_t eval_max_windows = 0;
    /// Training precision; the model is converted when it differs.
    DType precision = DType::f32;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Linear warmup from 0 to the peak over warmup_fraction·total_steps, then
/// cosine decay to final_lr_fraction·peak at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Zero moments shaped like `params`.
TrainState init_adam_state(const std::vector<NamedTensor>& params, std::uint64_t seed = 0);

/// One decoupled-decay AdamW update from the params' current grads:
/// p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps). TrainingError on a non-finite grad.
void adamw_step(const std::vector<NamedTensor>& params, TrainState& state, double lr,
                const AdamWHyper& hyper);

/// Global L2 norm of all grads; rescales them to `max_norm` when above it.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm);

struct MetricsRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    double learning_rate = 0.0;
    std::uint64_t tokens_seen = 0;
    double wall_ms_per_step = 0.0;
    std::optional<double> eval_loss;
    std::optional<double> eval_ppl;
};

/// One JSON object per line, plain decimal numbers.
std::string render_metrics_line(const MetricsRecord& r);
MetricsRecord parse_metrics_line(const std::string& line);
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

/// Batch k of a token stream: rows are windows of T+1 tokens at stride T,
/// taken in order and wrapping around. DataError when the stream is too short.
TokenBatch make_batch(const std::vector<TokenId>& stream, std::size_t batch_size,
                      std::size_t seq_len, std::size_t index);

struct TrainOptions {
    /// When set: metrics go to <dir>/train.metrics.jsonl and checkpoints to
    /// <dir>/checkpoint_step<N>.lpa and <dir>/checkpoint_final.lpa.
    std::optional<std::filesystem::path> out_dir;
};

struct TrainResult {
    Model model;
    std::vector<MetricsRecord> metrics;
    TrainState state;
};

/// Sequential-batch training with clipping and the warmup/cosine schedule.
/// TrainingError naming the step on a non-finite loss or gradient.
TrainResult train(const Model& model, const Corpus& corpus, const TrainConfig& cfg,
                  const TrainOptions& options = {});

struct EvalResult {
    double nll = 0.0;
    double ppl = 0.0;
    std::size_t tokens = 0;
};

/// Mean next-token NLL over non-overlapping windows (the last one may be
/// shorter); ppl = exp(nll). DataError for streams under 2 tokens.
EvalResult evaluate_ppl(const Model& model, const std::vector<TokenId>& stream,
                        std::size_t seq_len, std::size_t max_windows = 0);

struct DataConfig {
    std::filesystem::path corpus;
    SplitFractions fractions;
    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

struct SeedRecord {
    std::uint64_t seed = 0;
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    double test_nll = 0.0;
    double test_ppl = 0.0;
};

struct SeedReport {
    std::vector<SeedRecord> runs;
    double mean_ppl = 0.0;
    /// Sample standard deviation (n − 1); 0 when only one seed ran.
    double std_ppl = 0.0;
    bool single_seed = false;
};

/// Sample mean and n−1 standard deviation; std 0 for one value.
std::pair<double, double> mean_and_sample_std(std::span<const double> values);

/// "μ±σ" with two decimals, e.g. "23.41±0.12".
std::string format_mean_std(double mean, double std);

/// Trains and evaluates one model per seed (model and train seeds both set to
/// the run seed). ConfigError on an empty seed list. When out_dir is set each
/// seed writes into <out_dir>/seed<N>.
SeedReport run_seeds(const ExperimentConfig& experiment, std::span<const std::uint64_t> seeds,
                     const std::optional<std::filesystem::path>& out_dir = {});
/// Same, with a preloaded corpus.
SeedReport run_seeds(const ExperimentConfig& experiment, const Corpus& corpus,
                     std::span<const std::uint64_t> seeds,
                     const std::optional<std::filesystem::path>& out_dir = {});

struct BenchResult {
    double median_ms = 0.0;
    std::vector<double> samples_ms;
    std::uint64_t total_macs = 0;
    std::uint64_t attention_projection_macs = 0;
    std::uint64_t attention_core_macs = 0;
    bool low_confidence = false;
};

/// Forward passes on one length-L sequence: 3 untimed warmups, then `repeats`
/// timed runs. MACs come from a separate counted pass.
BenchResult bench_eval(const Model& model, std::size_t seq_len, std::size_t repeats);

}  // namespace lpa
