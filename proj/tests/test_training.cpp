#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "lpa/training.hpp"
#include "support.hpp"

using namespace lpa;

namespace {

ModelConfig tiny_model(std::size_t vocab = 257) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 16;
    c.head_count = 2;
    c.ffn_dim = 32;
    c.layer_count = 1;
    c.max_seq_len = 16;
    c.precision = DType::f32;
    return c;
}

TrainConfig quick_train(std::size_t steps) {
    TrainConfig t;
    t.batch_size = 4;
    t.seq_len = 16;
    t.total_steps = steps;
    t.learning_rate = 3e-3;
    return t;
}

Corpus text_corpus(std::size_t bytes) {
    return split_tokens(ByteTokenizer::encode(testkit::synthetic_text(bytes)), SplitFractions{});
}

}  // namespace

TEST(Tokenizer, BytesMapToThemselves) {
    EXPECT_EQ(ByteTokenizer::encode("ab"), (std::vector<TokenId>{97, 98}));
    std::string all;
    for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
    all += "héllo wörld ✓";
    EXPECT_EQ(ByteTokenizer::decode(ByteTokenizer::encode(all)), all);
    std::vector<TokenId> with_sentinel = {104, 105, ByteTokenizer::sentinel};
    EXPECT_EQ(ByteTokenizer::decode(with_sentinel), "hi");
    std::vector<TokenId> bad = {300};
    EXPECT_THROW(ByteTokenizer::decode(bad), IndexError);
}

TEST(Corpus, HundredByteFileSplitsEightyTenTen) {
    const auto dir = testkit::fresh_temp_dir("corpus");
    const std::string text(100, 'x');
    std::ofstream(dir / "c.txt", std::ios::binary) << text;
    const Corpus c = load_corpus(dir / "c.txt", SplitFractions{0.8, 0.1, 0.1});
    // 100 bytes plus the end-of-document sentinel.
    EXPECT_EQ(c.train.size(), 80u);
    EXPECT_EQ(c.valid.size(), 10u);
    EXPECT_EQ(c.test.size(), 11u);
    EXPECT_EQ(c.test.back(), ByteTokenizer::sentinel);
    std::vector<TokenId> joined = c.train;
    joined.insert(joined.end(), c.valid.begin(), c.valid.end());
    joined.insert(joined.end(), c.test.begin(), c.test.end());
    joined.pop_back();
    EXPECT_EQ(ByteTokenizer::decode(joined), text);
}

TEST(Corpus, DirectoryFilesAreSentinelSeparated) {
    const auto dir = testkit::fresh_temp_dir("corpusdir");
    std::ofstream(dir / "a.txt") << "abc";
    std::ofstream(dir / "b.txt") << "de";
    const Corpus c = load_corpus(dir, SplitFractions{1.0, 0.0, 0.0});
    EXPECT_EQ(c.train, (std::vector<TokenId>{97, 98, 99, 256, 100, 101, 256}));
}

TEST(Corpus, EmptyOrMissingIsADataError) {
    const auto dir = testkit::fresh_temp_dir("empty");
    std::ofstream(dir / "e.txt").close();
    EXPECT_THROW(load_corpus(dir / "e.txt"), DataError);
    EXPECT_THROW(load_corpus(dir / "missing.txt"), DataError);
    EXPECT_THROW(load_corpus(dir / "e.txt", SplitFractions{0.5, 0.2, 0.2}), ConfigError);
}

TEST(Batches, WindowsAtStrideTWrapAround) {
    std::vector<TokenId> s(21);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<TokenId>(i);
    // 21 tokens, T=4 → windows start at 0, 4, 8, 12, 16.
    const TokenBatch b0 = make_batch(s, 2, 4, 0);
    EXPECT_EQ(b0.tokens, (std::vector<TokenId>{0, 1, 2, 3, 4, 4, 5, 6, 7, 8}));
    const TokenBatch b2 = make_batch(s, 2, 4, 2);
    EXPECT_EQ(b2.tokens, (std::vector<TokenId>{16, 17, 18, 19, 20, 0, 1, 2, 3, 4}));
    EXPECT_THROW(make_batch(std::vector<TokenId>(4, 1), 1, 4, 0), DataError);
}

TEST(AdamW, SingleStepClosedForm) {
    Tensor p = Tensor::from_values({1}, {2.0}, DType::f64, true);
    std::vector<NamedTensor> params{{"p", p}};
    TrainState st = init_adam_state(params);
    sum(p).backward();  // g = 1
    adamw_step(params, st, 0.1, AdamWHyper{0.9, 0.999, 1e-8, 0.0});
    // m̂ = v̂ = 1 → Δ = −0.1 / (1 + 1e-8).
    EXPECT_NEAR(p.at(0), 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);
    EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, TwoStepsAgainstScalarRecurrence) {
    Tensor p = Tensor::from_values({2}, {1.0, -3.0}, DType::f64, true);
    std::vector<NamedTensor> params{{"p", p}};
    TrainState st = init_adam_state(params);
    const AdamWHyper h{0.8, 0.95, 1e-6, 0.1};
    const double lr = 0.05;
    std::vector<double> ref = {1.0, -3.0}, m(2, 0.0), v(2, 0.0);
    for (int t = 1; t <= 2; ++t) {
        p.zero_grad();
        sum(mul(p, p)).backward();  // g = 2p
        adamw_step(params, st, lr, h);
        for (int i = 0; i < 2; ++i) {
            const double g = 2 * ref[i];
            m[i] = h.beta1 * m[i] + (1 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1 - h.beta2) * g * g;
            const double mh = m[i] / (1 - std::pow(h.beta1, t));
            const double vh = v[i] / (1 - std::pow(h.beta2, t));
            ref[i] = ref[i] * (1 - lr * h.weight_decay) - lr * mh / (std::sqrt(vh) + h.eps);
        }
    }
    EXPECT_NEAR(p.at(0), ref[0], 1e-14);
    EXPECT_NEAR(p.at(1), ref[1], 1e-14);
}

TEST(AdamW, ZeroGradient) {
    Tensor p = Tensor::from_values({3}, {1.0, -2.0, 0.5}, DType::f64, true);
    std::vector<NamedTensor> params{{"p", p}};
    TrainState st = init_adam_state(params);
    sum(mul(p, Tensor::zeros({3}))).backward();
    adamw_step(params, st, 0.1, AdamWHyper{0.9, 0.999, 1e-8, 0.0});
    EXPECT_EQ(p.to_vector(), (std::vector<double>{1.0, -2.0, 0.5}));
    p.zero_grad();
    sum(mul(p, Tensor::zeros({3}))).backward();
    adamw_step(params, st, 0.1, AdamWHyper{0.9, 0.999, 1e-8, 0.5});
    EXPECT_NEAR(p.at(0), 1.0 * 0.95, 1e-15);
    EXPECT_NEAR(p.at(1), -2.0 * 0.95, 1e-15);
}

TEST(AdamW, NonFiniteGradientIsATrainingError) {
    Tensor p = Tensor::from_values({1}, {1.0}, DType::f64, true);
    std::vector<NamedTensor> params{{"p", p}};
    TrainState st = init_adam_state(params);
    sum(scale(p, INFINITY)).backward();
    EXPECT_THROW(adamw_step(params, st, 0.1, AdamWHyper{}), TrainingError);
}

TEST(AdamW, QuadraticBowlDecreasesMonotonically) {
    Tensor p = Tensor::from_values({4}, {3.0, -2.0, 1.5, 4.0}, DType::f64, true);
    Tensor c = Tensor::from_values({4}, {0.5, 0.5, -1.0, 1.0});
    std::vector<NamedTensor> params{{"p", p}};
    TrainState st = init_adam_state(params);
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.total_steps = 20;
    cfg.warmup_fraction = 0.1;
    double prev = INFINITY;
    for (std::size_t s = 0; s < 20; ++s) {
        p.zero_grad();
        Tensor diff = add(p, scale(c, -1.0));
        Tensor f = sum(mul(diff, diff));
        const double value = f.item();
        if (s >= 2) EXPECT_LT(value, prev) << s;
        prev = value;
        f.backward();
        adamw_step(params, st, lr_at(s + 1, cfg), AdamWHyper{});
    }
}

TEST(Clip, RescalesToThreshold) {
    Tensor a = Tensor::from_values({2}, {0.0, 0.0}, DType::f64, true);
    Tensor b = Tensor::from_values({1}, {0.0}, DType::f64, true);
    std::vector<NamedTensor> params{{"a", a}, {"b", b}};
    add(sum(mul(a, Tensor::from_values({2}, {3.0, 4.0}))),
        sum(mul(b, Tensor::from_values({1}, {12.0}))))
        .backward();
    const double before = clip_grad_norm(params, 1.0);
    EXPECT_DOUBLE_EQ(before, 13.0);
    double after = 0;
    for (const auto& p : params)
        for (double g : p.tensor.grad_vector()) after += g * g;
    EXPECT_LE(std::sqrt(after), 1.0 + 1e-6);
    EXPECT_NEAR(a.grad_vector()[0], 3.0 / 13.0, 1e-15);
    // Below the threshold nothing changes.
    EXPECT_DOUBLE_EQ(clip_grad_norm(params, 5.0), std::sqrt(after));
    EXPECT_NEAR(a.grad_vector()[0], 3.0 / 13.0, 1e-15);
}

TEST(Schedule, EndpointsAndShape) {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.total_steps = 1000;
    cfg.warmup_fraction = 0.01;
    EXPECT_EQ(lr_at(0, cfg), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(10, cfg), 1e-3);
    EXPECT_NEAR(lr_at(1000, cfg), 1e-4, 1e-18);
    EXPECT_NEAR(lr_at(5, cfg), 5e-4, 1e-18);
    double prev = 0;
    double max_jump = 0;
    for (std::size_t s = 0; s <= 1000; ++s) {
        const double v = lr_at(s, cfg);
        if (s > 0 && s <= 10) EXPECT_GT(v, prev);
        if (s > 10) EXPECT_LE(v, prev);
        if (s > 0) max_jump = std::max(max_jump, std::abs(v - prev));
        prev = v;
    }
    EXPECT_LE(max_jump, 1e-4 + 1e-12);
}

TEST(Metrics, LineRoundTrip) {
    MetricsRecord r;
    r.step = 12;
    r.train_loss = 2.718281828459045;
    r.learning_rate = 3e-4;
    r.tokens_seen = 123456;
    r.wall_ms_per_step = 0.5;
    EXPECT_EQ(render_metrics_line(parse_metrics_line(render_metrics_line(r))), render_metrics_line(r));
    const std::string line = render_metrics_line(r);
    EXPECT_NE(line.find("0.0003"), std::string::npos) << line;
    EXPECT_EQ(line.find("e-"), std::string::npos) << line;
    r.eval_loss = 1.5;
    r.eval_ppl = std::exp(1.5);
    const MetricsRecord back = parse_metrics_line(render_metrics_line(r));
    ASSERT_TRUE(back.eval_ppl.has_value());
    EXPECT_EQ(back.step, 12u);
    EXPECT_EQ(back.tokens_seen, 123456u);
    EXPECT_DOUBLE_EQ(back.train_loss, r.train_loss);
    EXPECT_DOUBLE_EQ(*back.eval_loss, 1.5);
    EXPECT_THROW(parse_metrics_line("{\"step\": 1}"), FormatError);
}

TEST(Train, LossDecreasesAndMetricsAreComplete) {
    const Corpus c = text_corpus(60'000);
    const auto dir = testkit::fresh_temp_dir("train");
    TrainConfig t = quick_train(120);
    t.eval_interval = 50;
    t.eval_max_windows = 8;
    const TrainResult r = train(build_model(tiny_model(), 1), c, t, TrainOptions{dir});
    ASSERT_EQ(r.metrics.size(), 120u);
    for (std::size_t i = 0; i < r.metrics.size(); ++i) {
        EXPECT_EQ(r.metrics[i].step, i + 1);
        EXPECT_TRUE(std::isfinite(r.metrics[i].train_loss));
    }
    EXPECT_LT(r.metrics.back().train_loss, 0.7 * r.metrics.front().train_loss);
    EXPECT_TRUE(r.metrics[49].eval_ppl.has_value());
    EXPECT_FALSE(r.metrics[50].eval_ppl.has_value());
    EXPECT_TRUE(r.metrics.back().eval_ppl.has_value());
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint_step50.lpa"));
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint_step100.lpa"));
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint_final.lpa"));
    const auto file = read_metrics(dir / "train.metrics.jsonl");
    ASSERT_EQ(file.size(), 120u);
    EXPECT_EQ(file.back().train_loss, r.metrics.back().train_loss);
    const Model back = load_checkpoint(dir / "checkpoint_final.lpa");
    EXPECT_EQ(evaluate_ppl(back, c.test, 16).nll, evaluate_ppl(r.model, c.test, 16).nll);
}

TEST(Train, SameSeedIsBitIdentical) {
    const Corpus c = text_corpus(20'000);
    const auto d1 = testkit::fresh_temp_dir("det1");
    const auto d2 = testkit::fresh_temp_dir("det2");
    const TrainConfig t = quick_train(30);
    const TrainResult a = train(build_model(tiny_model(), 4), c, t, TrainOptions{d1});
    const TrainResult b = train(build_model(tiny_model(), 4), c, t, TrainOptions{d2});
    for (std::size_t i = 0; i < a.metrics.size(); ++i)
        EXPECT_EQ(a.metrics[i].train_loss, b.metrics[i].train_loss);
    // Files differ only in wall time; compare everything else.
    const auto fa = read_metrics(d1 / "train.metrics.jsonl");
    const auto fb = read_metrics(d2 / "train.metrics.jsonl");
    ASSERT_EQ(fa.size(), fb.size());
    for (std::size_t i = 0; i < fa.size(); ++i) {
        EXPECT_EQ(fa[i].train_loss, fb[i].train_loss);
        EXPECT_EQ(fa[i].learning_rate, fb[i].learning_rate);
        EXPECT_EQ(fa[i].eval_loss, fb[i].eval_loss);
    }
}

TEST(Train, ZeroLearningRateLeavesLossUnchanged) {
    // Exactly batch_size windows, so every step sees the same batch.
    std::vector<TokenId> stream = testkit::random_batch(1, 4 * 16, 257, 3).tokens;
    Corpus c{stream, {}, {}};
    TrainConfig t = quick_train(5);
    t.learning_rate = 0.0;
    const TrainResult r = train(build_model(tiny_model(), 2), c, t);
    for (const auto& m : r.metrics) EXPECT_EQ(m.train_loss, r.metrics.front().train_loss);
}

TEST(Train, NonFiniteLossAbortsWithTheStep) {
    Model m = build_model(tiny_model(), 2);
    std::vector<double> poisoned(m.head.numel(), std::nan(""));
    m.head = Tensor::from_values(m.head.shape(), poisoned, m.head.dtype(), true);
    try {
        train(m, text_corpus(5000), quick_train(3));
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_EQ(e.step(), 1u);
        EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
    }
}

TEST(Train, RejectsTooShortCorpusAndLongWindows) {
    Corpus c{std::vector<TokenId>(10, 1), {}, {}};
    EXPECT_THROW(train(build_model(tiny_model(), 1), c, quick_train(1)), DataError);
    TrainConfig t = quick_train(1);
    t.seq_len = 32;
    EXPECT_THROW(train(build_model(tiny_model(), 1), text_corpus(5000), t), ConfigError);
}

TEST(Eval, UniformModelHasVocabularyPerplexity) {
    Model m = build_model(tiny_model(), 1);
    m.head = Tensor::zeros(m.head.shape(), m.head.dtype(), true);
    const auto stream = ByteTokenizer::encode(testkit::synthetic_text(3000));
    const EvalResult e = evaluate_ppl(m, stream, 16);
    EXPECT_NEAR(e.ppl, 257.0, 0.5);
    EXPECT_EQ(e.ppl, std::exp(e.nll));
    EXPECT_EQ(e.tokens, stream.size() - 1);
    EXPECT_THROW(evaluate_ppl(m, std::vector<TokenId>{1}, 16), DataError);
}

TEST(Eval, AgreesWithPerWindowLoss) {
    const Model m = build_model(tiny_model(), 3);
    const auto stream = ByteTokenizer::encode(testkit::synthetic_text(150));
    const EvalResult e = evaluate_ppl(m, stream, 16);
    double total = 0;
    std::size_t n = 0;
    for (std::size_t start = 0; start + 1 < stream.size(); start += 16) {
        const std::size_t len = std::min<std::size_t>(16, stream.size() - 1 - start);
        TokenBatch b{1, len, std::vector<TokenId>(stream.begin() + start, stream.begin() + start + len + 1)};
        total += m.lm_loss(b).item() * len;
        n += len;
    }
    EXPECT_EQ(e.tokens, n);
    EXPECT_NEAR(e.nll, total / n, 1e-6);
}

TEST(Eval, MemorizedWindowHasPerplexityNearOne) {
    ModelConfig mc = tiny_model();
    mc.d_model = 32;
    mc.head_count = 4;
    mc.layer_count = 2;
    mc.ffn_dim = 128;
    const std::vector<TokenId> stream = testkit::random_batch(1, 16, 257, 9).tokens;
    Corpus c{stream, {}, {}};
    TrainConfig t = quick_train(200);
    t.batch_size = 1;
    t.learning_rate = 1e-2;
    t.weight_decay = 0.0;
    t.warmup_fraction = 0.05;
    t.final_lr_fraction = 1.0;
    const TrainResult r = train(build_model(mc, 5), c, t);
    EXPECT_LT(evaluate_ppl(r.model, stream, 16).ppl, 1.2);
}

TEST(Seeds, StatisticsAndFormatting) {
    const std::vector<double> v = {10.0, 12.0, 14.0};
    const auto [mean, sd] = mean_and_sample_std(v);
    EXPECT_DOUBLE_EQ(mean, 12.0);
    EXPECT_DOUBLE_EQ(sd, 2.0);
    const std::vector<double> one = {3.5};
    EXPECT_EQ(mean_and_sample_std(one).second, 0.0);
    EXPECT_EQ(format_mean_std(23.414, 0.1234), "23.41±0.12");
}

TEST(Seeds, RunnerRecomputesFromRecords) {
    ExperimentConfig e;
    e.model = tiny_model();
    e.train = quick_train(15);
    e.train.eval_max_windows = 4;
    const Corpus c = text_corpus(20'000);
    const std::vector<std::uint64_t> seeds = {1, 2, 3};
    const SeedReport r = run_seeds(e, c, seeds);
    ASSERT_EQ(r.runs.size(), 3u);
    std::vector<double> ppl;
    for (const auto& run : r.runs) {
        EXPECT_TRUE(std::isfinite(run.test_ppl));
        ppl.push_back(run.test_ppl);
    }
    EXPECT_NE(ppl[0], ppl[1]);
    const double mean = (ppl[0] + ppl[1] + ppl[2]) / 3;
    double ss = 0;
    for (double p : ppl) ss += (p - mean) * (p - mean);
    EXPECT_NEAR(r.mean_ppl, mean, 1e-12);
    EXPECT_NEAR(r.std_ppl, std::sqrt(ss / 2), 1e-12);
    EXPECT_FALSE(r.single_seed);

    const std::vector<std::uint64_t> same = {4, 4, 4};
    EXPECT_EQ(run_seeds(e, c, same).std_ppl, 0.0);
    const std::vector<std::uint64_t> single = {4};
    const SeedReport s = run_seeds(e, c, single);
    EXPECT_TRUE(s.single_seed);
    EXPECT_EQ(s.std_ppl, 0.0);
    EXPECT_THROW(run_seeds(e, c, std::vector<std::uint64_t>{}), ConfigError);
}

TEST(Bench, CountsAndRepeats) {
    ModelConfig c = tiny_model();
    c.placement = PlacementSpec{PlacementMode::attn, SublayerSet::all(), 4};
    const Model m = build_model(c, 1);
    const BenchResult one = bench_eval(m, 8, 1);
    EXPECT_EQ(one.samples_ms.size(), 1u);
    EXPECT_TRUE(one.low_confidence);
    const BenchResult many = bench_eval(m, 8, 5);
    EXPECT_EQ(many.samples_ms.size(), 5u);
    EXPECT_FALSE(many.low_confidence);
    EXPECT_EQ(many.attention_projection_macs, 8u * 4 * 4 * (16 + 16));
    EXPECT_EQ(many.attention_core_macs, 2u * 8 * 8 * 16);
    EXPECT_EQ(many.total_macs, one.total_macs);
}
