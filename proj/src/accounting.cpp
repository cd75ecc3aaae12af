#include "lpa/accounting.hpp"

#include <cstdio>

namespace lpa {

double savings_threshold(std::size_t d_in, std::size_t d_out) {
    return static_cast<double>(d_in) * static_cast<double>(d_out) /
           static_cast<double>(d_in + d_out);
}

bool factored_saves(std::size_t d_in, std::size_t d_out, std::size_t r) {
    return factored_params(d_in, d_out, r) < dense_params(d_in, d_out);
}

std::uint64_t dense_params(std::size_t d_in, std::size_t d_out) {
    return static_cast<std::uint64_t>(d_in) * d_out;
}

std::uint64_t factored_params(std::size_t d_in, std::size_t d_out, std::size_t r) {
    return static_cast<std::uint64_t>(r) * (d_in + d_out);
}

std::uint64_t count_attention_flops(std::size_t d_in, std::size_t d_out,
                                    std::optional<std::size_t> r, std::size_t seq_len) {
    const std::uint64_t L = seq_len;
    const std::uint64_t core = 2 * L * L * d_out;
    if (r) {
        return 8 * L * static_cast<std::uint64_t>(*r) * (d_in + d_out) + core;
    }
    return 8 * L * d_in * d_out + core;
}

namespace {

std::uint64_t map_params(bool factored, std::size_t d_in, std::size_t d_out, std::size_t r) {
    return factored ? factored_params(d_in, d_out, r) : dense_params(d_in, d_out);
}

std::uint64_t attention_params(const ModelConfig& c) {
    const auto& p = c.placement;
    const std::size_t d = c.d_model;
    const std::size_t da = c.inner_dim();
    return map_params(p.factors(Sublayer::query), d, da, p.r) +
           map_params(p.factors(Sublayer::key), d, da, p.r) +
           map_params(p.factors(Sublayer::value), d, da, p.r) +
           map_params(p.factors(Sublayer::output), da, d, p.r);
}

std::uint64_t ffn_params(const ModelConfig& c) {
    const bool f = c.placement.factors_ffn();
    const std::uint64_t up = map_params(f, c.d_model, c.ffn_dim, c.placement.r);
    const std::uint64_t down = map_params(f, c.ffn_dim, c.d_model, c.placement.r);
    // swiglu3 gate has the same shape as the up projection.
    return c.ffn_variant == FfnVariant::swiglu3 ? 2 * up + down : up + down;
}

std::uint64_t norm_params(const ModelConfig& c) {
    return c.norm == NormKind::layer ? 2 * c.d_model : c.d_model;
}

}  // namespace

std::uint64_t layer_params(const ModelConfig& c) {
    return attention_params(c) + ffn_params(c) + 2 * norm_params(c);
}

AttentionMacs attention_macs(const ModelConfig& c, std::size_t seq_len) {
    const auto& p = c.placement;
    const std::uint64_t L = seq_len;
    const std::size_t d = c.d_model;
    const std::size_t da = c.inner_dim();
    AttentionMacs m;
    m.projection = L * (map_params(p.factors(Sublayer::query), d, da, p.r) +
                        map_params(p.factors(Sublayer::key), d, da, p.r) +
                        map_params(p.factors(Sublayer::value), d, da, p.r) +
                        map_params(p.factors(Sublayer::output), da, d, p.r));
    // Scores and weighted values, each L·L·head_dim per head.
    m.core = 2 * L * L * da;
    return m;
}

AccountingReport count_params(const ModelConfig& c, std::size_t seq_len) {
    c.validate();
    AccountingReport r;
    r.embeddings = static_cast<std::uint64_t>(c.vocab_size) * c.d_model;
    if (c.position == PositionKind::learned) {
        r.embeddings += static_cast<std::uint64_t>(c.max_seq_len) * c.d_model;
    }
    r.attention = c.layer_count * attention_params(c);
    r.ffn = c.layer_count * ffn_params(c);
    r.norms = (2 * c.layer_count + 1) * norm_params(c);
    r.output_head = c.tie_embeddings ? 0 : static_cast<std::uint64_t>(c.vocab_size) * c.d_model;
    r.total = r.embeddings + r.attention + r.ffn + r.norms + r.output_head;

    ModelConfig dense = c;
    dense.placement = PlacementSpec{};
    if (c.placement.mode == PlacementMode::none) {
        r.dense_baseline_total = r.total;
    } else {
        r.dense_baseline_total = count_params(dense, seq_len).total;
    }
    r.savings_vs_dense =
        static_cast<std::int64_t>(r.dense_baseline_total) - static_cast<std::int64_t>(r.total);

    r.seq_len = seq_len == 0 ? c.max_seq_len : seq_len;
    r.attention_flops_per_sequence = c.layer_count * attention_macs(c, r.seq_len).closed_form_flops();
    r.attention_flops_per_token =
        static_cast<double>(r.attention_flops_per_sequence) / static_cast<double>(r.seq_len);
    r.dense_attention_flops_per_sequence =
        c.layer_count * attention_macs(dense, r.seq_len).closed_form_flops();
    return r;
}

std::string to_string(SurplusStrategy s) {
    switch (s) {
        case SurplusStrategy::attn_dim:
            return "attn_dim";
        case SurplusStrategy::ffn_dim:
            return "ffn_dim";
        case SurplusStrategy::layer_num:
            return "layer_num";
    }
    return "?";
}

SurplusStrategy parse_surplus_strategy(const std::string& s) {
    if (s == "attn_dim") {
        return SurplusStrategy::attn_dim;
    }
    if (s == "ffn_dim") {
        return SurplusStrategy::ffn_dim;
    }
    if (s == "layer_num") {
        return SurplusStrategy::layer_num;
    }
    throw ConfigError("unknown strategy '" + s + "' (expected attn_dim|ffn_dim|layer_num)");
}

Allocation allocate_surplus(const ModelConfig& cfg, std::uint64_t target,
                            SurplusStrategy strategy) {
    const std::uint64_t current = count_params(cfg).total;
    if (target < current) {
        throw InfeasibleError("target " + std::to_string(target) + " is below the current total " +
                              std::to_string(current));
    }

    // The free variable is v = base + k·step for integer k >= 0.
    std::size_t base = 0;
    std::size_t step = 1;
    switch (strategy) {
        case SurplusStrategy::attn_dim:
            base = cfg.inner_dim();
            step = cfg.head_count * (cfg.position == PositionKind::rotary ? 2 : 1);
            break;
        case SurplusStrategy::ffn_dim:
            base = cfg.ffn_dim;
            break;
        case SurplusStrategy::layer_num:
            base = cfg.layer_count;
            break;
    }
    auto config_at = [&](std::size_t k) {
        ModelConfig c = cfg;
        const std::size_t v = base + k * step;
        switch (strategy) {
            case SurplusStrategy::attn_dim:
                c.attn_inner_dim = v;
                break;
            case SurplusStrategy::ffn_dim:
                c.ffn_dim = v;
                break;
            case SurplusStrategy::layer_num:
                c.layer_count = v;
                break;
        }
        return c;
    };
    auto total_at = [&](std::size_t k) { return count_params(config_at(k)).total; };

    // Exponential probe then binary search for the largest k with total <= target.
    std::size_t lo = 0;
    std::size_t hi = 1;
    while (total_at(hi) <= target) {
        lo = hi;
        hi *= 2;
    }
    while (hi - lo > 1) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (total_at(mid) <= target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Allocation a;
    a.config = config_at(lo);
    a.achieved_total = total_at(lo);
    a.quantum_cost = total_at(lo + 1) - a.achieved_total;
    return a;
}

const std::vector<PublishedTotal>& published_totals() {
    static const std::vector<PublishedTotal> anchors = {
        {"setting1-135m", 135'000'000, 1'000'000},
        {"setting1-lpa-125m-r256", 125'000'000, 1'000'000},
        {"setting1-369m", 369'000'000, 1'000'000},
        {"setting1-lpa-319m-r256", 319'000'000, 1'000'000},
        {"setting2-134m", 134'000'000, 1'000'000},
        {"setting2-lpa-115m-r128", 115'000'000, 1'000'000},
        {"setting2-368m", 368'000'000, 1'000'000},
        {"setting2-lpa-318m-r256", 318'000'000, 1'000'000},
        {"3b-same-dim", 3'230'000'000, 20'000'000},
        {"3b-same-param", 2'490'000'000, 20'000'000},
        {"3b-lpa-r512", 2'430'000'000, 20'000'000},
    };
    return anchors;
}

std::string format_millions(std::uint64_t params) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2fM", static_cast<double>(params) / 1e6);
    return buf;
}

std::string format_billions(std::uint64_t params) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3fB", static_cast<double>(params) / 1e9);
    return buf;
}

}  // namespace lpa
