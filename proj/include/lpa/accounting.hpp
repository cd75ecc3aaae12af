#pragma once

// Closed-form parameter and FLOP arithmetic for ModelConfig, independent of any
// built model. Tests cross-check every count against a structural walk.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lpa/config.hpp"

namespace lpa {

/// d_in·d_out/(d_in+d_out): a factored module saves parameters iff r is
/// strictly below this value.
double savings_threshold(std::size_t d_in, std::size_t d_out);

/// Exact integer form of the threshold test: r·(d_in+d_out) < d_in·d_out.
bool factored_saves(std::size_t d_in, std::size_t d_out, std::size_t r);

std::uint64_t dense_params(std::size_t d_in, std::size_t d_out);
std::uint64_t factored_params(std::size_t d_in, std::size_t d_out, std::size_t r);

/// Attention-layer forward FLOPs in the closed-form convention:
/// dense 8L·d_in·d_out + 2L²·d_out, factored 8L·r·(d_in+d_out) + 2L²·d_out.
std::uint64_t count_attention_flops(std::size_t d_in, std::size_t d_out,
                                    std::optional<std::size_t> r, std::size_t seq_len);

/// Multiply-accumulates of one attention forward, split the way the counter
/// attributes them: the four projections and the score/value products.
struct AttentionMacs {
    std::uint64_t projection = 0;
    std::uint64_t core = 0;

    /// The closed form above counts projection MACs twice and core MACs once.
    std::uint64_t closed_form_flops() const { return 2 * projection + core; }
};

/// Per-layer MACs for the attention of `cfg` at sequence length `seq_len`
/// (respects placement subsets and the widened inner dim).
AttentionMacs attention_macs(const ModelConfig& cfg, std::size_t seq_len);

struct AccountingReport {
    std::uint64_t embeddings = 0;  // token + learned positions
    std::uint64_t attention = 0;
    std::uint64_t ffn = 0;
    std::uint64_t norms = 0;
    std::uint64_t output_head = 0;
    std::uint64_t total = 0;

    /// Same config with placement none.
    std::uint64_t dense_baseline_total = 0;
    std::int64_t savings_vs_dense = 0;

    std::size_t seq_len = 0;
    /// All layers, closed-form convention (2·projection MACs + core MACs).
    std::uint64_t attention_flops_per_sequence = 0;
    double attention_flops_per_token = 0.0;
    std::uint64_t dense_attention_flops_per_sequence = 0;
};

/// seq_len 0 means cfg.max_seq_len.
AccountingReport count_params(const ModelConfig& cfg, std::size_t seq_len = 0);

/// Per-layer parameter cost (attention + ffn + two norms).
std::uint64_t layer_params(const ModelConfig& cfg);

enum class SurplusStrategy { attn_dim, ffn_dim, layer_num };
std::string to_string(SurplusStrategy s);
SurplusStrategy parse_surplus_strategy(const std::string& s);

struct Allocation {
    ModelConfig config;
    std::uint64_t achieved_total = 0;
    /// Parameter cost of one more rounding step of the free variable.
    std::uint64_t quantum_cost = 0;
};

/// Grows one free variable of `cfg` until count_params is as large as possible
/// without exceeding `target`. InfeasibleError when target < current total.
Allocation allocate_surplus(const ModelConfig& cfg, std::uint64_t target,
                            SurplusStrategy strategy);

/// Published parameter totals for the compiled-in presets.
struct PublishedTotal {
    std::string preset;
    std::uint64_t published_params;
    /// Accepted absolute deviation: 1M for the small tables, 0.02B for 3B.
    std::uint64_t tolerance;
};
const std::vector<PublishedTotal>& published_totals();

/// "369.0M" / "3.23B" style decimal rendering.
std::string format_millions(std::uint64_t params);
std::string format_billions(std::uint64_t params);

}  // namespace lpa
