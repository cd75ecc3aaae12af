#pragma once

// Linear maps (dense or factored), multi-head causal attention, feed-forward
// networks, normalization, and residual blocks. Inputs are row-major
// [B·T × d] activations; attention additionally needs the (B, T) split.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "lpa/config.hpp"
#include "lpa/gradcheck.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

using Rng = std::mt19937_64;

/// Leaf tensor with N(0, std²) entries drawn in double precision, then cast.
Tensor random_normal(const Shape& shape, double std, DType dtype, Rng& rng,
                     bool requires_grad = true);

/// x·W (+ bias).
class DenseLinear {
public:
    DenseLinear(Tensor w, Tensor bias = {});
    /// W ~ N(0, 1/d_in), no bias.
    static DenseLinear random(std::size_t d_in, std::size_t d_out, DType dtype, Rng& rng);

    Tensor forward(const Tensor& x) const;
    std::size_t d_in() const { return w_.dim(0); }
    std::size_t d_out() const { return w_.dim(1); }
    std::uint64_t param_count() const;
    const Tensor& weight() const { return w_; }
    const Tensor& bias() const { return bias_; }
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

private:
    Tensor w_;
    Tensor bias_;
};

/// (x·W_A)·W_B with W_A [d_in×r], W_B [r×d_out]. The product W_A·W_B is never
/// formed. Construction warns when r is at or above the savings threshold.
class FactoredLinear {
public:
    FactoredLinear(Tensor a, Tensor b);
    /// W_A ~ N(0, 1/d_in), W_B ~ N(0, 1/r).
    static FactoredLinear random(std::size_t d_in, std::size_t d_out, std::size_t r, DType dtype,
                                 Rng& rng);
    /// Rank-r truncated SVD of a dense [d_in×d_out] weight, split as
    /// W_A = U·√S, W_B = √S·Vᵀ. Exact when r = min(d_in, d_out).
    static FactoredLinear from_dense(const Tensor& w, std::size_t r);

    Tensor forward(const Tensor& x) const;
    std::size_t d_in() const { return a_.dim(0); }
    std::size_t d_out() const { return b_.dim(1); }
    std::size_t rank() const { return a_.dim(1); }
    std::uint64_t param_count() const;
    const Tensor& a() const { return a_; }
    const Tensor& b() const { return b_; }
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

private:
    Tensor a_;
    Tensor b_;
};

using LinearMap = std::variant<DenseLinear, FactoredLinear>;

Tensor apply_linear(const LinearMap& map, const Tensor& x);
bool is_factored(const LinearMap& map);
std::uint64_t param_count(const LinearMap& map);
std::size_t map_d_in(const LinearMap& map);
std::size_t map_d_out(const LinearMap& map);
void collect(const LinearMap& map, const std::string& prefix, std::vector<NamedTensor>& out);
/// Dense or factored random map.
LinearMap make_linear(bool factored, std::size_t d_in, std::size_t d_out, std::size_t r,
                      DType dtype, Rng& rng);

/// Transform applied to per-head queries and keys shaped [B·H × T × dh].
using PositionTransform = std::function<Tensor(const Tensor&)>;

struct AttentionLayer {
    LinearMap query;
    LinearMap key;
    LinearMap value;
    LinearMap output;
    std::size_t head_count = 1;
    bool causal = true;
    PositionTransform position;  // empty: none

    /// x: [B·T × d]. DimensionError when T = 0 or shapes disagree.
    Tensor forward(const Tensor& x, std::size_t batch, std::size_t seq) const;
    /// Single sequence: x is [T × d].
    Tensor forward(const Tensor& x) const { return forward(x, 1, x.dim(0)); }

    std::size_t inner_dim() const { return map_d_out(query); }
    std::size_t factored_count() const;
    std::uint64_t param_count() const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// Attention with each sublayer dense or factored per `placement`, inner width
/// `inner_dim`.
AttentionLayer make_attention(std::size_t d_model, std::size_t inner_dim, std::size_t heads,
                              const PlacementSpec& placement, DType dtype, Rng& rng);

struct FeedForward {
    FfnVariant variant = FfnVariant::relu2;
    std::optional<LinearMap> gate;  // swiglu3 only
    LinearMap up;
    LinearMap down;

    Tensor forward(const Tensor& x) const;
    std::size_t factored_count() const;
    std::uint64_t param_count() const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

FeedForward make_ffn(FfnVariant variant, std::size_t d_model, std::size_t ffn_dim, bool factored,
                     std::size_t r, DType dtype, Rng& rng);

struct Norm {
    NormKind kind = NormKind::rms;
    Tensor gain;
    Tensor bias;  // layer norm only
    double eps = 1e-5;

    /// Unit gain, zero bias.
    static Norm identity_init(NormKind kind, std::size_t d, double eps, DType dtype);
    Tensor forward(const Tensor& x) const;
    std::uint64_t param_count() const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct Block {
    AttentionLayer attention;
    FeedForward ffn;
    Norm attn_norm;
    Norm ffn_norm;
    BlockOrder order = BlockOrder::setting2;

    Tensor forward(const Tensor& x, std::size_t batch, std::size_t seq) const;
    std::uint64_t param_count() const;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// One residual sub-block in the given order: Sub is attention or ffn.
Tensor residual(const Tensor& x, const Norm& norm, BlockOrder order,
                const std::function<Tensor(const Tensor&)>& sub);

enum class LayerKind { attention, ffn };

/// Entry (i, j) is true iff some element of ∂z_i/∂x_j exceeds 1e-8 in
/// magnitude, for a randomly initialized f64 layer of width d on L tokens.
/// Attention is causal, with two heads when d is even and one otherwise.
std::vector<std::vector<bool>> jacobian_dependence(LayerKind kind, std::size_t seq_len,
                                                   std::size_t d, std::uint64_t seed = 1);

}  // namespace lpa
