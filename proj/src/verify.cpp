#include "lpa/verify.hpp"

#include <cmath>
#include <cstdlib>
#include <random>

#include <json.hpp>

#include "lpa/accounting.hpp"
#include "lpa/diagnostics.hpp"
#include "lpa/gradcheck.hpp"
#include "lpa/model.hpp"

namespace lpa {

std::string to_string(Suite s) {
    switch (s) {
        case Suite::grad:
            return "grad";
        case Suite::jacobian:
            return "jacobian";
        case Suite::equivalence:
            return "equivalence";
        case Suite::accounting:
            return "accounting";
        case Suite::all:
            return "all";
    }
    return "?";
}

Suite parse_suite(const std::string& s) {
    for (Suite v : {Suite::grad, Suite::jacobian, Suite::equivalence, Suite::accounting,
                    Suite::all}) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw ConfigError("unknown suite '" + s + "' (expected grad|jacobian|equivalence|accounting|all)");
}

namespace {

/// Drops construction warnings (full-rank factors sit at the savings threshold).
class QuietWarnings {
public:
    QuietWarnings() : previous_(set_warning_handler([](const std::string&) {})) {}
    ~QuietWarnings() { set_warning_handler(previous_); }

private:
    WarningHandler previous_;
};

CheckResult at_most(std::string suite, std::string name, double value, double bound,
                    std::string detail = {}) {
    return {std::move(suite), std::move(name), value <= bound, value, bound, std::move(detail)};
}

CheckResult below(std::string suite, std::string name, double value, double bound,
                  std::string detail = {}) {
    return {std::move(suite), std::move(name), value < bound, value, bound, std::move(detail)};
}

CheckResult holds(std::string suite, std::string name, bool ok, std::string detail = {}) {
    return {std::move(suite), std::move(name), ok, ok ? 1.0 : 0.0, 1.0, std::move(detail)};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    const auto x = a.to_vector();
    const auto y = b.to_vector();
    if (x.size() != y.size()) {
        return INFINITY;
    }
    double m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        m = std::max(m, std::abs(x[i] - y[i]));
    }
    return m;
}

std::string mode_label(PlacementMode mode) {
    switch (mode) {
        case PlacementMode::none:
            return "dense";
        case PlacementMode::attn:
            return "lpa";
        case PlacementMode::ffn:
            return "low-ffn";
        case PlacementMode::all:
            return "low-all";
    }
    return "?";
}

}  // namespace

ModelConfig grad_check_config(bool setting1, PlacementMode mode) {
    ModelConfig c;
    c.vocab_size = 11;
    c.d_model = 8;
    c.head_count = 2;
    c.ffn_dim = 16;
    c.layer_count = 2;
    c.max_seq_len = 4;
    c.precision = DType::f64;
    if (setting1) {
        c.norm = NormKind::layer;
        c.order = BlockOrder::setting1;
        c.ffn_variant = FfnVariant::relu2;
        c.position = PositionKind::learned;
    } else {
        c.norm = NormKind::rms;
        c.order = BlockOrder::setting2;
        c.ffn_variant = FfnVariant::swiglu3;
        c.position = PositionKind::rotary;
    }
    c.placement.mode = mode;
    c.placement.r = mode == PlacementMode::none ? 0 : 2;
    return c;
}

double relu_margin(const Model& model, const TokenBatch& batch) {
    NoGradGuard no_grad;
    const std::size_t T = batch.seq_len;
    std::vector<TokenId> ids;
    for (std::size_t r = 0; r < batch.batch; ++r) {
        const auto row = batch.tokens.begin() + static_cast<std::ptrdiff_t>(r * (T + 1));
        ids.insert(ids.end(), row, row + static_cast<std::ptrdiff_t>(T));
    }
    Tensor x = embedding(model.token_embedding, ids);
    if (model.position_embedding.defined()) {
        std::vector<TokenId> pos(ids.size());
        for (std::size_t i = 0; i < pos.size(); ++i) {
            pos[i] = static_cast<TokenId>(i % T);
        }
        x = add(x, embedding(model.position_embedding, pos));
    }
    double margin = INFINITY;
    for (const Block& b : model.blocks) {
        const Tensor h = residual(x, b.attn_norm, b.order, [&](const Tensor& t) {
            return b.attention.forward(t, batch.batch, T);
        });
        x = residual(h, b.ffn_norm, b.order, [&](const Tensor& t) {
            if (b.ffn.variant == FfnVariant::relu2) {
                for (double v : apply_linear(b.ffn.up, t).to_vector()) {
                    margin = std::min(margin, std::abs(v));
                }
            }
            return b.ffn.forward(t);
        });
    }
    return margin;
}

GradCheckCase grad_check_case(bool setting1, PlacementMode mode, std::uint64_t seed,
                              double min_relu_margin) {
    constexpr double kEmbeddingStd = 0.5;
    constexpr std::size_t kBatchRows = 2;
    constexpr std::size_t kAttempts = 64;
    const ModelConfig cfg = grad_check_config(setting1, mode);
    GradCheckCase c{build_model(cfg, seed), {}, 0.0};
    Rng emb_rng(seed + 200);
    c.model.token_embedding = random_normal(c.model.token_embedding.shape(), kEmbeddingStd,
                                            cfg.precision, emb_rng);
    if (c.model.position_embedding.defined()) {
        c.model.position_embedding = random_normal(c.model.position_embedding.shape(),
                                                   kEmbeddingStd, cfg.precision, emb_rng);
    }
    std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(cfg.vocab_size - 1));
    for (std::size_t attempt = 0; attempt < kAttempts; ++attempt) {
        Rng rng(seed + 100 + attempt);
        TokenBatch batch{kBatchRows, cfg.max_seq_len, {}};
        for (std::size_t i = 0; i < batch.batch * (batch.seq_len + 1); ++i) {
            batch.tokens.push_back(pick(rng));
        }
        const double margin = relu_margin(c.model, batch);
        if (attempt == 0 || margin > c.relu_margin) {
            c.batch = std::move(batch);
            c.relu_margin = margin;
        }
        if (c.relu_margin >= min_relu_margin) {
            break;
        }
    }
    return c;
}

std::vector<CheckResult> grad_suite(const VerifyOptions& o) {
    std::vector<CheckResult> out;
    for (bool setting1 : {true, false}) {
        for (PlacementMode mode :
             {PlacementMode::none, PlacementMode::attn, PlacementMode::ffn, PlacementMode::all}) {
            const GradCheckCase c = grad_check_case(setting1, mode, o.seed);
            const auto r = grad_check([&] { return c.model.lm_loss(c.batch); },
                                      c.model.parameters(), o.grad_step, Stencil::adaptive);
            const std::string name =
                std::string(setting1 ? "setting1" : "setting2") + "/" + mode_label(mode);
            std::string detail = "worst " + r.worst_tensor + "[" +
                                 std::to_string(r.worst_index) + "] over " +
                                 std::to_string(r.coordinates) + " coordinates";
            if (std::isfinite(c.relu_margin)) {
                detail += ", relu margin " + format_double(c.relu_margin);
            }
            out.push_back(below("grad", name, r.max_relative_error, o.grad_tol, detail));
        }
    }
    return out;
}

std::vector<CheckResult> jacobian_suite(const VerifyOptions& o) {
    std::vector<CheckResult> out;
    constexpr std::size_t L = 6;
    constexpr std::size_t d = 8;

    const auto ffn = jacobian_dependence(LayerKind::ffn, L, d, o.seed);
    bool diagonal = true;
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
            diagonal = diagonal && (ffn[i][j] == (i == j));
        }
    }
    out.push_back(holds("jacobian", "ffn-diagonal-only", diagonal, "L=6 d=8"));

    const auto attn = jacobian_dependence(LayerKind::attention, L, d, o.seed);
    bool upper_clear = true;
    bool lower_dense = true;
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
            if (j > i) {
                upper_clear = upper_clear && !attn[i][j];
            } else {
                lower_dense = lower_dense && attn[i][j];
            }
        }
    }
    out.push_back(holds("jacobian", "attention-causal-upper-zero", upper_clear, "L=6 d=8"));
    out.push_back(holds("jacobian", "attention-prefix-dense", lower_dense, "L=6 d=8"));

    const auto single = jacobian_dependence(LayerKind::attention, 1, d, o.seed);
    out.push_back(holds("jacobian", "attention-single-token", single.size() == 1 && single[0][0]));
    return out;
}

std::vector<CheckResult> equivalence_suite(const VerifyOptions& o) {
    QuietWarnings quiet;
    std::vector<CheckResult> out;
    const DType dt = DType::f64;
    constexpr std::size_t d = 16;
    constexpr std::size_t ffn_dim = 32;
    constexpr std::size_t L = 8;
    Rng rng(o.seed);
    const Tensor x = random_normal({L, d}, 1.0, dt, rng, false);

    {
        const AttentionLayer dense = make_attention(d, d, 4, PlacementSpec{}, dt, rng);
        auto factor = [](const LinearMap& m) {
            const auto& w = std::get<DenseLinear>(m).weight();
            return LinearMap(FactoredLinear::from_dense(w, std::min(w.dim(0), w.dim(1))));
        };
        const AttentionLayer low{factor(dense.query), factor(dense.key), factor(dense.value),
                                 factor(dense.output), dense.head_count, true, {}};
        out.push_back(at_most("equivalence", "attention",
                              max_abs_diff(dense.forward(x), low.forward(x)), o.equivalence_tol,
                              "d=16 h=4 L=8"));
    }
    for (FfnVariant v : {FfnVariant::relu2, FfnVariant::swiglu3}) {
        const FeedForward dense = make_ffn(v, d, ffn_dim, false, 0, dt, rng);
        FeedForward low = dense;
        auto factor = [](LinearMap& m) {
            const auto& w = std::get<DenseLinear>(m).weight();
            m = FactoredLinear::from_dense(w, std::min(w.dim(0), w.dim(1)));
        };
        if (low.gate) {
            factor(*low.gate);
        }
        factor(low.up);
        factor(low.down);
        out.push_back(at_most("equivalence", "ffn-" + to_string(v),
                              max_abs_diff(dense.forward(x), low.forward(x)), o.equivalence_tol,
                              "d=16 ffn=32"));
    }
    for (bool setting1 : {true, false}) {
        ModelConfig c = grad_check_config(setting1, PlacementMode::none);
        c.d_model = d;
        c.head_count = 4;
        c.ffn_dim = ffn_dim;
        c.max_seq_len = L;
        c.vocab_size = 31;
        const Model dense = build_model(c, o.seed);
        const Model low = factor_exactly(dense);
        std::vector<TokenId> ids(2 * L);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            ids[i] = static_cast<TokenId>((i * 5 + 1) % c.vocab_size);
        }
        NoGradGuard no_grad;
        out.push_back(at_most("equivalence",
                              std::string("model-logits-") + (setting1 ? "setting1" : "setting2"),
                              max_abs_diff(dense.logits(ids, 2, L), low.logits(ids, 2, L)),
                              o.equivalence_tol, "d=16 layers=2"));
    }
    return out;
}

std::vector<CheckResult> accounting_suite(const VerifyOptions& o) {
    QuietWarnings quiet;
    std::vector<CheckResult> out;
    auto tol = [&](double def) { return o.accounting_tol ? *o.accounting_tol : def; };

    for (const auto& anchor : published_totals()) {
        const auto total = count_params(preset(anchor.preset)).total;
        const double diff =
            std::abs(static_cast<double>(total) - static_cast<double>(anchor.published_params));
        out.push_back(at_most("accounting", "total/" + anchor.preset, diff,
                              tol(static_cast<double>(anchor.tolerance)),
                              "computed " + std::to_string(total) + ", published " +
                                  std::to_string(anchor.published_params)));
    }

    const ModelConfig base = preset("setting1-369m");
    const std::uint64_t base_total = count_params(base).total;
    for (const auto& [subset, published] :
         {std::pair<const char*, std::uint64_t>{"K,V", 344'000'000},
          std::pair<const char*, std::uint64_t>{"Q,K,V", 331'000'000}}) {
        ModelConfig c = base;
        c.placement = {PlacementMode::attn, SublayerSet::parse(subset), 256};
        const auto total = count_params(c).total;
        out.push_back(at_most(
            "accounting", std::string("subset/") + subset,
            std::abs(static_cast<double>(total) - static_cast<double>(published)), tol(1e6),
            "computed " + std::to_string(total)));
    }

    // r-sweep deltas: each factored d×d map saves d² − 2dr.
    for (std::size_t r : {256u, 128u, 64u, 32u}) {
        ModelConfig c = base;
        c.placement = {PlacementMode::attn, SublayerSet::all(), r};
        const auto delta = base_total - count_params(c).total;
        const std::uint64_t d = base.d_model;
        const std::uint64_t expected = base.layer_count * 4 * (d * d - 2 * d * r);
        out.push_back(holds("accounting", "r-sweep-delta/r" + std::to_string(r), delta == expected,
                            std::to_string(delta) + " vs " + std::to_string(expected)));
    }

    bool threshold_ok = true;
    std::string first_bad;
    for (std::size_t din = 1; din <= 64 && threshold_ok; ++din) {
        for (std::size_t dout = 1; dout <= 64 && threshold_ok; ++dout) {
            const double t = savings_threshold(din, dout);
            for (std::size_t r = 1; r <= 64; ++r) {
                const bool saves = factored_params(din, dout, r) < dense_params(din, dout);
                if (saves != (static_cast<double>(r) < t) || saves != factored_saves(din, dout, r)) {
                    threshold_ok = false;
                    first_bad = std::to_string(din) + "x" + std::to_string(dout) +
                                " r=" + std::to_string(r);
                    break;
                }
            }
        }
    }
    out.push_back(holds("accounting", "savings-threshold-1..64", threshold_ok, first_bad));

    for (std::size_t L : {8u, 64u}) {
        for (std::size_t d : {32u, 128u}) {
            Rng rng(o.seed);
            const Tensor x = random_normal({L, d}, 1.0, DType::f32, rng, false);
            NoGradGuard no_grad;
            for (std::optional<std::size_t> r :
                 {std::optional<std::size_t>{}, std::optional<std::size_t>{4},
                  std::optional<std::size_t>{16}}) {
                PlacementSpec p;
                if (r) {
                    p = {PlacementMode::attn, SublayerSet::all(), *r};
                }
                const AttentionLayer layer = make_attention(d, d, 4, p, DType::f32, rng);
                std::uint64_t counted = 0;
                {
                    FlopScope scope;
                    layer.forward(x);
                    counted = 2 * FlopCounter::category("attn.proj") +
                              FlopCounter::category("attn.core");
                }
                const std::uint64_t expected = count_attention_flops(d, d, r, L);
                out.push_back(holds("accounting",
                                    "flops/L" + std::to_string(L) + "-d" + std::to_string(d) +
                                        (r ? "-r" + std::to_string(*r) : std::string("-dense")),
                                    counted == expected,
                                    std::to_string(counted) + " vs " + std::to_string(expected)));
            }
        }
    }

    for (const char* name : {"desk", "desk-lpa-r16", "desk-setting1", "desk-setting1-lpa-r16",
                             "bench-d512", "bench-d512-lpa-r64"}) {
        const ModelConfig c = preset(name);
        const Model m = build_model(c, o.seed);
        const auto walked = m.param_count();
        const auto closed = count_params(c).total;
        out.push_back(holds("accounting", std::string("walk/") + name, walked == closed,
                            std::to_string(walked) + " vs " + std::to_string(closed)));
    }

    const ModelConfig lpa = preset("setting1-lpa-319m-r256");
    for (SurplusStrategy s :
         {SurplusStrategy::attn_dim, SurplusStrategy::ffn_dim, SurplusStrategy::layer_num}) {
        const Allocation a = allocate_surplus(lpa, base_total, s);
        const auto recount = count_params(a.config).total;
        const bool ok = recount == a.achieved_total && recount <= base_total &&
                        base_total - recount < a.quantum_cost;
        out.push_back(holds("accounting", "allocate/" + to_string(s), ok,
                            "achieved " + std::to_string(recount) + ", gap " +
                                std::to_string(base_total - recount) + ", quantum " +
                                std::to_string(a.quantum_cost)));
        if (s == SurplusStrategy::attn_dim) {
            out.push_back(holds("accounting", "allocate/attn_dim-width",
                                a.config.inner_dim() == 3072,
                                "d_a = " + std::to_string(a.config.inner_dim())));
        }
    }
    return out;
}

std::vector<CheckResult> run_suite(Suite suite, const VerifyOptions& options) {
    switch (suite) {
        case Suite::grad:
            return grad_suite(options);
        case Suite::jacobian:
            return jacobian_suite(options);
        case Suite::equivalence:
            return equivalence_suite(options);
        case Suite::accounting:
            return accounting_suite(options);
        case Suite::all:
            break;
    }
    std::vector<CheckResult> all;
    for (Suite s : {Suite::accounting, Suite::jacobian, Suite::equivalence, Suite::grad}) {
        auto part = run_suite(s, options);
        all.insert(all.end(), part.begin(), part.end());
    }
    return all;
}

std::string render_check_line(const CheckResult& r) {
    nlohmann::ordered_json j;
    j["suite"] = r.suite;
    j["check"] = r.name;
    j["status"] = r.passed ? "pass" : "fail";
    j["value"] = r.value;
    j["bound"] = r.bound;
    j["detail"] = r.detail;
    return j.dump();
}

}  // namespace lpa
