#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lpa/config.hpp"
#include "lpa/layers.hpp"
#include "lpa/ops.hpp"

namespace lpa {

/// B rows of T+1 consecutive tokens; row b predicts tokens[b][1..T] from
/// tokens[b][0..T-1].
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;  // T
    std::vector<TokenId> tokens;  // batch × (seq_len + 1), row-major
};

/// Decoder-only language model: token (+ learned position) embeddings, a stack
/// of residual blocks, a final norm and an output projection.
class Model {
public:
    const ModelConfig& config() const { return config_; }

    /// Every trainable tensor, in a fixed order with stable dotted names.
    std::vector<NamedTensor> parameters() const;
    /// Structural walk over the built modules.
    std::uint64_t param_count() const;
    std::size_t factored_count() const;

    /// ids: batch × seq row-major. Returns [batch·seq × vocab] logits.
    Tensor logits(std::span<const TokenId> ids, std::size_t batch, std::size_t seq) const;
    /// Mean next-token cross entropy over batch·seq positions.
    Tensor lm_loss(const TokenBatch& batch) const;

    /// Greedy when temperature == 0, else seeded sampling from
    /// softmax(logits / temperature). The context is the trailing
    /// max_seq_len tokens. LengthError when the prompt is empty or too long.
    std::vector<TokenId> generate(std::span<const TokenId> prompt, std::size_t n_tokens,
                                  double temperature, std::uint64_t seed) const;

    /// Independent copy of every tensor.
    Model clone() const;

    Tensor token_embedding;     // [vocab × d]
    Tensor position_embedding;  // [max_seq_len × d], learned positions only
    std::vector<Block> blocks;
    Norm final_norm;
    Tensor head;  // [d × vocab], untied only

private:
    friend Model build_model(const ModelConfig& config, std::uint64_t seed);
    friend Model factor_exactly(const Model& dense);
    ModelConfig config_;
};

/// Deterministic in (config, seed). ConfigError on an invalid config.
Model build_model(const ModelConfig& config, std::uint64_t seed);

/// Dense model -> same function with every attention and FFN map replaced by
/// its full-rank SVD factorization (placement all, r = d_model). Requires
/// placement none and inner_dim, ffn_dim >= d_model.
Model factor_exactly(const Model& dense);

/// Copies values from `source` into the same-named parameters of `model`.
/// FormatError on a missing name, an extra name, or a shape mismatch.
void assign_parameters(Model& model, const std::vector<NamedTensor>& source);

}  // namespace lpa
