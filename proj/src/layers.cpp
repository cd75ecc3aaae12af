#include "lpa/layers.hpp"

#include <Eigen/SVD>
#include <cmath>

#include "lpa/accounting.hpp"
#include "lpa/diagnostics.hpp"
#include "lpa/ops.hpp"

namespace lpa {

Tensor random_normal(const Shape& shape, double std, DType dtype, Rng& rng, bool requires_grad) {
    std::normal_distribution<double> dist(0.0, std);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) {
        v = dist(rng);
    }
    return Tensor::from_values(shape, values, dtype, requires_grad);
}

// ---- DenseLinear -----------------------------------------------------------

DenseLinear::DenseLinear(Tensor w, Tensor bias) : w_(std::move(w)), bias_(std::move(bias)) {
    if (w_.rank() != 2) {
        throw DimensionError("dense weight must be rank 2, got " + shape_to_string(w_.shape()));
    }
    if (bias_.defined() && (bias_.rank() != 2 || bias_.dim(0) != 1 || bias_.dim(1) != d_out())) {
        throw DimensionError("dense bias must be [1×" + std::to_string(d_out()) + "], got " +
                             shape_to_string(bias_.shape()));
    }
}

DenseLinear DenseLinear::random(std::size_t d_in, std::size_t d_out, DType dtype, Rng& rng) {
    return DenseLinear(random_normal({d_in, d_out}, 1.0 / std::sqrt(double(d_in)), dtype, rng));
}

Tensor DenseLinear::forward(const Tensor& x) const {
    Tensor y = matmul(x, w_);
    if (!bias_.defined()) {
        return y;
    }
    // Broadcast the bias row by multiplying a column of ones into it.
    Tensor ones = Tensor::full({x.dim(0), 1}, 1.0, x.dtype());
    return add(y, matmul(ones, bias_));
}

std::uint64_t DenseLinear::param_count() const {
    return static_cast<std::uint64_t>(w_.numel()) + (bias_.defined() ? bias_.numel() : 0);
}

void DenseLinear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".w", w_});
    if (bias_.defined()) {
        out.push_back({prefix + ".bias", bias_});
    }
}

// ---- FactoredLinear --------------------------------------------------------

FactoredLinear::FactoredLinear(Tensor a, Tensor b) : a_(std::move(a)), b_(std::move(b)) {
    if (a_.rank() != 2 || b_.rank() != 2 || a_.dim(1) != b_.dim(0)) {
        throw DimensionError("factored pair needs [d_in×r]·[r×d_out], got " +
                             shape_to_string(a_.shape()) + " and " + shape_to_string(b_.shape()));
    }
    if (!factored_saves(d_in(), d_out(), rank())) {
        warn("factored map " + std::to_string(d_in()) + "x" + std::to_string(d_out()) +
             " with r=" + std::to_string(rank()) + " does not save parameters (threshold " +
             format_double(savings_threshold(d_in(), d_out())) + ")");
    }
}

FactoredLinear FactoredLinear::random(std::size_t d_in, std::size_t d_out, std::size_t r,
                                      DType dtype, Rng& rng) {
    Tensor a = random_normal({d_in, r}, 1.0 / std::sqrt(double(d_in)), dtype, rng);
    Tensor b = random_normal({r, d_out}, 1.0 / std::sqrt(double(r)), dtype, rng);
    return FactoredLinear(std::move(a), std::move(b));
}

FactoredLinear FactoredLinear::from_dense(const Tensor& w, std::size_t r) {
    if (w.rank() != 2) {
        throw DimensionError("from_dense expects a rank-2 weight");
    }
    const std::size_t m = w.dim(0);
    const std::size_t n = w.dim(1);
    if (r == 0 || r > std::min(m, n)) {
        throw DimensionError("from_dense rank " + std::to_string(r) + " outside [1, " +
                             std::to_string(std::min(m, n)) + "]");
    }
    Eigen::MatrixXd dense(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            dense(i, j) = w.at(i * n + j);
        }
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd root = svd.singularValues().head(r).cwiseSqrt();
    std::vector<double> a(m * r);
    std::vector<double> b(r * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < r; ++k) {
            a[i * r + k] = svd.matrixU()(i, k) * root(k);
        }
    }
    for (std::size_t k = 0; k < r; ++k) {
        for (std::size_t j = 0; j < n; ++j) {
            b[k * n + j] = root(k) * svd.matrixV()(j, k);
        }
    }
    return FactoredLinear(Tensor::from_values({m, r}, a, w.dtype(), true),
                          Tensor::from_values({r, n}, b, w.dtype(), true));
}

Tensor FactoredLinear::forward(const Tensor& x) const { return matmul(matmul(x, a_), b_); }

std::uint64_t FactoredLinear::param_count() const {
    return static_cast<std::uint64_t>(a_.numel()) + b_.numel();
}

void FactoredLinear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".a", a_});
    out.push_back({prefix + ".b", b_});
}

// ---- LinearMap -------------------------------------------------------------

Tensor apply_linear(const LinearMap& map, const Tensor& x) {
    return std::visit([&](const auto& m) { return m.forward(x); }, map);
}

bool is_factored(const LinearMap& map) { return std::holds_alternative<FactoredLinear>(map); }

std::uint64_t param_count(const LinearMap& map) {
    return std::visit([](const auto& m) { return m.param_count(); }, map);
}

std::size_t map_d_in(const LinearMap& map) {
    return std::visit([](const auto& m) { return m.d_in(); }, map);
}

std::size_t map_d_out(const LinearMap& map) {
    return std::visit([](const auto& m) { return m.d_out(); }, map);
}

void collect(const LinearMap& map, const std::string& prefix, std::vector<NamedTensor>& out) {
    std::visit([&](const auto& m) { m.collect(prefix, out); }, map);
}

LinearMap make_linear(bool factored, std::size_t d_in, std::size_t d_out, std::size_t r,
                      DType dtype, Rng& rng) {
    if (factored) {
        return FactoredLinear::random(d_in, d_out, r, dtype, rng);
    }
    return DenseLinear::random(d_in, d_out, dtype, rng);
}

// ---- Attention -------------------------------------------------------------

Tensor AttentionLayer::forward(const Tensor& x, std::size_t batch, std::size_t seq) const {
    if (batch == 0 || seq == 0) {
        throw DimensionError("attention needs a non-empty input");
    }
    if (x.rank() != 2 || x.dim(0) != batch * seq || x.dim(1) != map_d_in(query)) {
        throw DimensionError("attention input " + shape_to_string(x.shape()) + " does not match [" +
                             std::to_string(batch * seq) + "×" + std::to_string(map_d_in(query)) +
                             "]");
    }
    const std::size_t da = inner_dim();
    if (da % head_count != 0) {
        throw DimensionError("attention inner dim not divisible by head count");
    }
    Tensor q;
    Tensor k;
    Tensor v;
    {
        FlopCategory cat("attn.proj");
        q = split_heads(apply_linear(query, x), batch, seq, head_count);
        k = split_heads(apply_linear(key, x), batch, seq, head_count);
        v = split_heads(apply_linear(value, x), batch, seq, head_count);
    }
    if (position) {
        q = position(q);
        k = position(k);
    }
    Tensor context;
    {
        FlopCategory cat("attn.core");
        const double s = 1.0 / std::sqrt(static_cast<double>(da / head_count));
        Tensor weights = masked_softmax(scale(bmm_nt(q, k), s), causal);
        context = merge_heads(bmm(weights, v), batch, head_count);
    }
    FlopCategory cat("attn.proj");
    return apply_linear(output, context);
}

std::size_t AttentionLayer::factored_count() const {
    return is_factored(query) + is_factored(key) + is_factored(value) + is_factored(output);
}

std::uint64_t AttentionLayer::param_count() const {
    return lpa::param_count(query) + lpa::param_count(key) + lpa::param_count(value) +
           lpa::param_count(output);
}

void AttentionLayer::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    lpa::collect(query, prefix + ".q", out);
    lpa::collect(key, prefix + ".k", out);
    lpa::collect(value, prefix + ".v", out);
    lpa::collect(output, prefix + ".o", out);
}

AttentionLayer make_attention(std::size_t d_model, std::size_t inner_dim, std::size_t heads,
                              const PlacementSpec& p, DType dtype, Rng& rng) {
    return AttentionLayer{
        make_linear(p.factors(Sublayer::query), d_model, inner_dim, p.r, dtype, rng),
        make_linear(p.factors(Sublayer::key), d_model, inner_dim, p.r, dtype, rng),
        make_linear(p.factors(Sublayer::value), d_model, inner_dim, p.r, dtype, rng),
        make_linear(p.factors(Sublayer::output), inner_dim, d_model, p.r, dtype, rng),
        heads,
        true,
        {},
    };
}

// ---- FeedForward -----------------------------------------------------------

Tensor FeedForward::forward(const Tensor& x) const {
    FlopCategory cat("ffn");
    if (variant == FfnVariant::relu2) {
        return apply_linear(down, relu(apply_linear(up, x)));
    }
    if (!gate) {
        throw ContractError("swiglu3 feed-forward is missing its gate");
    }
    return apply_linear(down, mul(silu(apply_linear(*gate, x)), apply_linear(up, x)));
}

std::size_t FeedForward::factored_count() const {
    return (gate && is_factored(*gate)) + is_factored(up) + is_factored(down);
}

std::uint64_t FeedForward::param_count() const {
    return (gate ? lpa::param_count(*gate) : 0) + lpa::param_count(up) + lpa::param_count(down);
}

void FeedForward::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    if (gate) {
        lpa::collect(*gate, prefix + ".gate", out);
    }
    lpa::collect(up, prefix + ".up", out);
    lpa::collect(down, prefix + ".down", out);
}

FeedForward make_ffn(FfnVariant variant, std::size_t d_model, std::size_t ffn_dim, bool factored,
                     std::size_t r, DType dtype, Rng& rng) {
    std::optional<LinearMap> gate;
    if (variant == FfnVariant::swiglu3) {
        gate = make_linear(factored, d_model, ffn_dim, r, dtype, rng);
    }
    LinearMap up = make_linear(factored, d_model, ffn_dim, r, dtype, rng);
    LinearMap down = make_linear(factored, ffn_dim, d_model, r, dtype, rng);
    return FeedForward{variant, std::move(gate), std::move(up), std::move(down)};
}

// ---- Norm ------------------------------------------------------------------

Norm Norm::identity_init(NormKind kind, std::size_t d, double eps, DType dtype) {
    Norm n;
    n.kind = kind;
    n.eps = eps;
    n.gain = Tensor::full({d}, 1.0, dtype, true);
    if (kind == NormKind::layer) {
        n.bias = Tensor::zeros({d}, dtype, true);
    }
    return n;
}

Tensor Norm::forward(const Tensor& x) const {
    return kind == NormKind::layer ? layer_norm(x, gain, bias, eps) : rms_norm(x, gain, eps);
}

std::uint64_t Norm::param_count() const {
    return gain.numel() + (bias.defined() ? bias.numel() : 0);
}

void Norm::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".gain", gain});
    if (bias.defined()) {
        out.push_back({prefix + ".bias", bias});
    }
}

// ---- Block -----------------------------------------------------------------

Tensor residual(const Tensor& x, const Norm& norm, BlockOrder order,
                const std::function<Tensor(const Tensor&)>& sub) {
    switch (order) {
        case BlockOrder::setting1:
            return add(x, norm.forward(sub(x)));
        case BlockOrder::setting2:
            return add(x, sub(norm.forward(x)));
        case BlockOrder::postnorm:
            return norm.forward(add(x, sub(x)));
    }
    throw ContractError("unknown block order");
}

Tensor Block::forward(const Tensor& x, std::size_t batch, std::size_t seq) const {
    Tensor h = residual(x, attn_norm, order,
                        [&](const Tensor& t) { return attention.forward(t, batch, seq); });
    return residual(h, ffn_norm, order, [&](const Tensor& t) { return ffn.forward(t); });
}

std::uint64_t Block::param_count() const {
    return attention.param_count() + ffn.param_count() + attn_norm.param_count() +
           ffn_norm.param_count();
}

void Block::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    attention.collect(prefix + ".attn", out);
    ffn.collect(prefix + ".ffn", out);
    attn_norm.collect(prefix + ".attn_norm", out);
    ffn_norm.collect(prefix + ".ffn_norm", out);
}

// ---- Jacobian dependence ---------------------------------------------------

std::vector<std::vector<bool>> jacobian_dependence(LayerKind kind, std::size_t seq_len,
                                                   std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    const DType dt = DType::f64;
    std::function<Tensor(const Tensor&)> layer;
    if (kind == LayerKind::attention) {
        const std::size_t heads = d % 2 == 0 ? 2 : 1;
        auto attn = std::make_shared<AttentionLayer>(
            make_attention(d, d, heads, PlacementSpec{}, dt, rng));
        layer = [attn](const Tensor& x) { return attn->forward(x); };
    } else {
        auto ffn = std::make_shared<FeedForward>(
            make_ffn(FfnVariant::relu2, d, 4 * d, false, 0, dt, rng));
        layer = [ffn](const Tensor& x) { return ffn->forward(x); };
    }
    Tensor x = random_normal({seq_len, d}, 1.0, dt, rng, true);
    Tensor z = layer(x);

    std::vector<std::vector<bool>> dep(seq_len, std::vector<bool>(seq_len, false));
    Tensor selector = Tensor::zeros(z.shape(), dt);
    for (std::size_t i = 0; i < seq_len; ++i) {
        for (std::size_t c = 0; c < z.dim(1); ++c) {
            selector.set(i * z.dim(1) + c, 1.0);
            x.zero_grad();
            sum(mul(z, selector)).backward();
            selector.set(i * z.dim(1) + c, 0.0);
            const auto g = x.grad_vector();
            for (std::size_t j = 0; j < seq_len; ++j) {
                for (std::size_t e = 0; e < d; ++e) {
                    if (std::abs(g[j * d + e]) > 1e-8) {
                        dep[i][j] = true;
                    }
                }
            }
        }
    }
    return dep;
}

}  // namespace lpa
