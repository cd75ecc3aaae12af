#include "lpa/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace lpa {

// ---- Tokenizer and corpus --------------------------------------------------

std::vector<TokenId> ByteTokenizer::encode(std::string_view text) {
    std::vector<TokenId> ids(text.size());
    std::transform(text.begin(), text.end(), ids.begin(),
                   [](char c) { return static_cast<TokenId>(static_cast<unsigned char>(c)); });
    return ids;
}

std::string ByteTokenizer::decode(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id == sentinel) {
            continue;
        }
        if (id < 0 || id > 255) {
            throw IndexError("token " + std::to_string(id) + " is not a byte");
        }
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

void SplitFractions::validate() const {
    if (train < 0 || valid < 0 || test < 0) {
        throw ConfigError("split fractions must be non-negative");
    }
    if (std::abs(train + valid + test - 1.0) > 1e-9) {
        throw ConfigError("split fractions must sum to 1, got " +
                          format_double(train + valid + test));
    }
}

Corpus split_tokens(const std::vector<TokenId>& stream, const SplitFractions& f) {
    f.validate();
    const double n = static_cast<double>(stream.size());
    // The small slack absorbs binary rounding of products like 0.1·100.
    auto part = [&](double frac) {
        return std::min(stream.size(), static_cast<std::size_t>(std::floor(frac * n + 1e-9)));
    };
    const std::size_t n_train = part(f.train);
    const std::size_t n_valid = std::min(part(f.valid), stream.size() - n_train);
    Corpus c;
    c.train.assign(stream.begin(), stream.begin() + n_train);
    c.valid.assign(stream.begin() + n_train, stream.begin() + n_train + n_valid);
    c.test.assign(stream.begin() + n_train + n_valid, stream.end());
    return c;
}

Corpus load_corpus(const std::filesystem::path& path, const SplitFractions& fractions) {
    fractions.validate();
    std::vector<std::filesystem::path> files;
    std::error_code ec;
    if (std::filesystem::is_directory(path, ec)) {
        for (const auto& entry : std::filesystem::directory_iterator(path)) {
            if (entry.is_regular_file()) {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(path);
    }
    std::vector<TokenId> stream;
    std::size_t bytes = 0;
    for (const auto& file : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) {
            throw DataError("cannot read corpus '" + file.string() + "'");
        }
        const std::string text((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
        bytes += text.size();
        const auto ids = ByteTokenizer::encode(text);
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream.push_back(ByteTokenizer::sentinel);
    }
    if (bytes == 0) {
        throw DataError("corpus '" + path.string() + "' is empty");
    }
    return split_tokens(stream, fractions);
}

// ---- Config and schedule ---------------------------------------------------

void TrainConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) {
            throw ConfigError("invalid train config: " + what);
        }
    };
    require(learning_rate >= 0, "learning_rate >= 0");
    require(warmup_fraction > 0 && warmup_fraction < 1, "0 < warmup_fraction < 1");
    require(final_lr_fraction >= 0 && final_lr_fraction <= 1, "0 <= final_lr_fraction <= 1");
    require(batch_size > 0, "batch_size > 0");
    require(seq_len > 0, "seq_len > 0");
    require(total_steps > 0, "total_steps > 0");
    require(beta1 >= 0 && beta1 < 1, "0 <= beta1 < 1");
    require(beta2 >= 0 && beta2 < 1, "0 <= beta2 < 1");
    require(eps > 0, "eps > 0");
    require(weight_decay >= 0, "weight_decay >= 0");
    require(grad_clip_norm >= 0, "grad_clip_norm >= 0");
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    const double peak = cfg.learning_rate;
    const double warmup = cfg.warmup_fraction * static_cast<double>(cfg.total_steps);
    const double s = static_cast<double>(std::min(step, cfg.total_steps));
    if (s < warmup) {
        return peak * s / warmup;
    }
    const double span = static_cast<double>(cfg.total_steps) - warmup;
    const double progress = span > 0 ? (s - warmup) / span : 1.0;
    const double floor_lr = cfg.final_lr_fraction * peak;
    return floor_lr + (peak - floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- Optimizer -------------------------------------------------------------

TrainState init_adam_state(const std::vector<NamedTensor>& params, std::uint64_t seed) {
    TrainState s;
    s.seed = seed;
    for (const auto& p : params) {
        s.first_moment.push_back({p.name, Tensor::zeros(p.tensor.shape(), p.tensor.dtype())});
        s.second_moment.push_back({p.name, Tensor::zeros(p.tensor.shape(), p.tensor.dtype())});
    }
    return s;
}

void adamw_step(const std::vector<NamedTensor>& params, TrainState& state, double lr,
                const AdamWHyper& h) {
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw ContractError("optimizer state does not match the parameter list");
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    const double shrink = 1.0 - lr * h.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].tensor;
        Tensor m = state.first_moment[i].tensor;
        Tensor v = state.second_moment[i].tensor;
        visit_dtype(p.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto pv = p.template data<T>();
            auto g = p.template grad_data<T>();
            auto mv = m.template data<T>();
            auto vv = v.template data<T>();
            for (std::size_t j = 0; j < pv.size(); ++j) {
                const double gj = g[j];
                if (!std::isfinite(gj)) {
                    throw TrainingError("non-finite gradient in '" + params[i].name + "'",
                                        state.step);
                }
                const double mj = h.beta1 * mv[j] + (1.0 - h.beta1) * gj;
                const double vj = h.beta2 * vv[j] + (1.0 - h.beta2) * gj * gj;
                mv[j] = static_cast<T>(mj);
                vv[j] = static_cast<T>(vj);
                const double update = (mj / c1) / (std::sqrt(vj / c2) + h.eps);
                pv[j] = static_cast<T>(static_cast<double>(pv[j]) * shrink - lr * update);
            }
        });
    }
}

double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p.tensor.grad_vector()) {
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && std::isfinite(norm) && norm > max_norm) {
        const double factor = max_norm / norm;
        for (const auto& p : params) {
            Tensor t = p.tensor;
            visit_dtype(t.dtype(), [&](auto tag) {
                using T = decltype(tag);
                for (T& g : t.template grad_data<T>()) {
                    g = static_cast<T>(g * factor);
                }
            });
        }
    }
    return norm;
}

// ---- Metrics ---------------------------------------------------------------

namespace {

std::string decimal(double v) {
    char buf[400];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
    return std::string(buf, res.ptr);
}

}  // namespace

std::string render_metrics_line(const MetricsRecord& r) {
    std::string out = "{\"step\":" + std::to_string(r.step) +
                      ",\"train_loss\":" + decimal(r.train_loss) +
                      ",\"learning_rate\":" + decimal(r.learning_rate) +
                      ",\"tokens_seen\":" + std::to_string(r.tokens_seen) +
                      ",\"wall_ms_per_step\":" + decimal(r.wall_ms_per_step);
    if (r.eval_loss) {
        out += ",\"eval_loss\":" + decimal(*r.eval_loss);
    }
    if (r.eval_ppl) {
        out += ",\"eval_ppl\":" + decimal(*r.eval_ppl);
    }
    return out + "}";
}

MetricsRecord parse_metrics_line(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad metrics line: ") + e.what());
    }
    MetricsRecord r;
    try {
        r.step = j.at("step").get<std::size_t>();
        r.train_loss = j.at("train_loss").get<double>();
        r.learning_rate = j.at("learning_rate").get<double>();
        r.tokens_seen = j.at("tokens_seen").get<std::uint64_t>();
        r.wall_ms_per_step = j.at("wall_ms_per_step").get<double>();
        if (j.contains("eval_loss")) {
            r.eval_loss = j.at("eval_loss").get<double>();
        }
        if (j.contains("eval_ppl")) {
            r.eval_ppl = j.at("eval_ppl").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad metrics record: ") + e.what());
    }
    return r;
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot read metrics '" + path.string() + "'");
    }
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            out.push_back(parse_metrics_line(line));
        }
    }
    return out;
}

// ---- Batching and training -------------------------------------------------

TokenBatch make_batch(const std::vector<TokenId>& stream, std::size_t batch_size,
                      std::size_t seq_len, std::size_t index) {
    if (stream.size() < seq_len + 1) {
        throw DataError("token stream of " + std::to_string(stream.size()) +
                        " tokens is shorter than one window of " + std::to_string(seq_len + 1));
    }
    const std::size_t windows = (stream.size() - 1) / seq_len;
    TokenBatch b;
    b.batch = batch_size;
    b.seq_len = seq_len;
    b.tokens.reserve(batch_size * (seq_len + 1));
    for (std::size_t r = 0; r < batch_size; ++r) {
        const std::size_t w = (index * batch_size + r) % windows;
        const auto first = stream.begin() + static_cast<std::ptrdiff_t>(w * seq_len);
        b.tokens.insert(b.tokens.end(), first, first + static_cast<std::ptrdiff_t>(seq_len + 1));
    }
    return b;
}

namespace {

Model converted_copy(const Model& model, DType precision) {
    if (model.config().precision == precision) {
        return model.clone();
    }
    ModelConfig c = model.config();
    c.precision = precision;
    Model m = build_model(c, 0);
    assign_parameters(m, model.parameters());
    return m;
}

}  // namespace

TrainResult train(const Model& initial, const Corpus& corpus, const TrainConfig& cfg,
                  const TrainOptions& options) {
    cfg.validate();
    if (cfg.seq_len > initial.config().max_seq_len) {
        throw ConfigError("train seq_len " + std::to_string(cfg.seq_len) +
                          " exceeds the model's max_seq_len " +
                          std::to_string(initial.config().max_seq_len));
    }
    if (corpus.train.size() < cfg.seq_len + 1) {
        throw DataError("training split holds " + std::to_string(corpus.train.size()) +
                        " tokens, fewer than one window of " + std::to_string(cfg.seq_len + 1));
    }

    TrainResult result{converted_copy(initial, cfg.precision), {}, {}};
    Model& model = result.model;
    const auto params = model.parameters();
    result.state = init_adam_state(params, cfg.seed);
    const AdamWHyper hyper{cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};

    std::ofstream metrics_out;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        metrics_out.open(*options.out_dir / "train.metrics.jsonl", std::ios::trunc);
        if (!metrics_out) {
            throw DataError("cannot write metrics into '" + options.out_dir->string() + "'");
        }
    }
    const bool can_eval = corpus.valid.size() >= 2;

    for (std::size_t s = 0; s < cfg.total_steps; ++s) {
        const auto start = std::chrono::steady_clock::now();
        const TokenBatch batch = make_batch(corpus.train, cfg.batch_size, cfg.seq_len, s);
        for (auto p : params) {
            p.tensor.zero_grad();
        }
        const Tensor loss = model.lm_loss(batch);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            throw TrainingError("non-finite training loss", s + 1);
        }
        loss.backward();
        const double norm = clip_grad_norm(params, cfg.grad_clip_norm);
        if (!std::isfinite(norm)) {
            throw TrainingError("non-finite gradient norm", s + 1);
        }
        const double lr = lr_at(s + 1, cfg);
        adamw_step(params, result.state, lr, hyper);
        const auto stop = std::chrono::steady_clock::now();

        MetricsRecord rec;
        rec.step = s + 1;
        rec.train_loss = loss_value;
        rec.learning_rate = lr;
        rec.tokens_seen = static_cast<std::uint64_t>(rec.step) * cfg.batch_size * cfg.seq_len;
        rec.wall_ms_per_step = std::chrono::duration<double, std::milli>(stop - start).count();

        const bool last = rec.step == cfg.total_steps;
        const bool checkpoint_now =
            last || (cfg.eval_interval > 0 && rec.step % cfg.eval_interval == 0);
        if (checkpoint_now && can_eval) {
            const EvalResult ev =
                evaluate_ppl(model, corpus.valid, cfg.seq_len, cfg.eval_max_windows);
            rec.eval_loss = ev.nll;
            rec.eval_ppl = ev.ppl;
        }
        if (metrics_out.is_open()) {
            metrics_out << render_metrics_line(rec) << '\n';
            metrics_out.flush();
        }
        if (checkpoint_now && options.out_dir) {
            const auto name = last ? std::string("checkpoint_final.lpa")
                                   : "checkpoint_step" + std::to_string(rec.step) + ".lpa";
            save_checkpoint(model, *options.out_dir / name, &result.state);
        }
        result.metrics.push_back(rec);
    }
    return result;
}

EvalResult evaluate_ppl(const Model& model, const std::vector<TokenId>& stream,
                        std::size_t seq_len, std::size_t max_windows) {
    if (stream.size() < 2) {
        throw DataError("evaluation needs at least 2 tokens, got " + std::to_string(stream.size()));
    }
    if (seq_len == 0) {
        throw ConfigError("evaluation seq_len must be positive");
    }
    seq_len = std::min(seq_len, model.config().max_seq_len);
    NoGradGuard no_grad;

    struct Window {
        std::size_t start;
        std::size_t len;
    };
    std::vector<Window> windows;
    for (std::size_t start = 0; start + 1 < stream.size(); start += seq_len) {
        windows.push_back({start, std::min(seq_len, stream.size() - 1 - start)});
        if (max_windows > 0 && windows.size() == max_windows) {
            break;
        }
    }

    constexpr std::size_t kRowsPerPass = 16;
    double total = 0.0;
    std::size_t tokens = 0;
    std::size_t i = 0;
    while (i < windows.size()) {
        // Group consecutive windows of equal length into one pass.
        std::size_t j = i;
        while (j < windows.size() && j - i < kRowsPerPass && windows[j].len == windows[i].len) {
            ++j;
        }
        TokenBatch b;
        b.batch = j - i;
        b.seq_len = windows[i].len;
        for (std::size_t w = i; w < j; ++w) {
            const auto first = stream.begin() + static_cast<std::ptrdiff_t>(windows[w].start);
            b.tokens.insert(b.tokens.end(), first,
                            first + static_cast<std::ptrdiff_t>(windows[w].len + 1));
        }
        const double mean = model.lm_loss(b).item();
        total += mean * static_cast<double>(b.batch * b.seq_len);
        tokens += b.batch * b.seq_len;
        i = j;
    }
    EvalResult r;
    r.tokens = tokens;
    r.nll = total / static_cast<double>(tokens);
    r.ppl = std::exp(r.nll);
    return r;
}

// ---- Multi-seed runner -----------------------------------------------------

std::pair<double, double> mean_and_sample_std(std::span<const double> values) {
    if (values.empty()) {
        throw ConfigError("mean of an empty list");
    }
    double mean = 0.0;
    for (double v : values) {
        mean += v;
    }
    mean /= static_cast<double>(values.size());
    if (values.size() == 1) {
        return {mean, 0.0};
    }
    double sq = 0.0;
    for (double v : values) {
        sq += (v - mean) * (v - mean);
    }
    return {mean, std::sqrt(sq / static_cast<double>(values.size() - 1))};
}

std::string format_mean_std(double mean, double std) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f±%.2f", mean, std);
    return buf;
}

SeedReport run_seeds(const ExperimentConfig& experiment, const Corpus& corpus,
                     std::span<const std::uint64_t> seeds,
                     const std::optional<std::filesystem::path>& out_dir) {
    if (seeds.empty()) {
        throw ConfigError("run_seeds needs at least one seed");
    }
    SeedReport report;
    std::vector<double> ppls;
    for (std::uint64_t seed : seeds) {
        TrainConfig tc = experiment.train;
        tc.seed = seed;
        TrainOptions opts;
        if (out_dir) {
            opts.out_dir = *out_dir / ("seed" + std::to_string(seed));
        }
        const Model init = build_model(experiment.model, seed);
        const TrainResult run = train(init, corpus, tc, opts);
        const EvalResult ev = evaluate_ppl(run.model, corpus.test, tc.seq_len, tc.eval_max_windows);
        report.runs.push_back({seed, run.metrics.front().train_loss,
                               run.metrics.back().train_loss, ev.nll, ev.ppl});
        ppls.push_back(ev.ppl);
    }
    const auto [mean, std] = mean_and_sample_std(ppls);
    report.mean_ppl = mean;
    report.std_ppl = std;
    report.single_seed = seeds.size() == 1;
    return report;
}

SeedReport run_seeds(const ExperimentConfig& experiment, std::span<const std::uint64_t> seeds,
                     const std::optional<std::filesystem::path>& out_dir) {
    if (seeds.empty()) {
        throw ConfigError("run_seeds needs at least one seed");
    }
    const Corpus corpus = load_corpus(experiment.data.corpus, experiment.data.fractions);
    return run_seeds(experiment, corpus, seeds, out_dir);
}

// ---- Benchmark -------------------------------------------------------------

BenchResult bench_eval(const Model& model, std::size_t seq_len, std::size_t repeats) {
    if (repeats == 0) {
        throw ConfigError("bench needs at least one repeat");
    }
    std::vector<TokenId> ids(seq_len);
    for (std::size_t i = 0; i < seq_len; ++i) {
        ids[i] = static_cast<TokenId>((i * 7 + 3) % model.config().vocab_size);
    }
    NoGradGuard no_grad;
    BenchResult r;
    {
        FlopScope scope;
        model.logits(ids, 1, seq_len);
        r.total_macs = FlopCounter::total();
        r.attention_projection_macs = FlopCounter::category("attn.proj");
        r.attention_core_macs = FlopCounter::category("attn.core");
    }
    for (int w = 0; w < 3; ++w) {
        model.logits(ids, 1, seq_len);
    }
    for (std::size_t i = 0; i < repeats; ++i) {
        const auto start = std::chrono::steady_clock::now();
        model.logits(ids, 1, seq_len);
        const auto stop = std::chrono::steady_clock::now();
        r.samples_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    std::vector<double> sorted = r.samples_ms;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    r.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    r.low_confidence = repeats == 1;
    return r;
}

}  // namespace lpa
