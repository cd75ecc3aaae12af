#include "lpa/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace lpa {

namespace {

constexpr double kEmbeddingStd = 0.02;

}  // namespace

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const DType dt = config.precision;
    const std::size_t d = config.d_model;

    Model m;
    m.config_ = config;
    m.token_embedding = random_normal({config.vocab_size, d}, kEmbeddingStd, dt, rng);
    if (config.position == PositionKind::learned) {
        m.position_embedding = random_normal({config.max_seq_len, d}, kEmbeddingStd, dt, rng);
    }
    PositionTransform rope;
    if (config.position == PositionKind::rotary) {
        const double base = config.rope_base;
        rope = [base](const Tensor& t) { return rotary(t, base); };
    }
    for (std::size_t l = 0; l < config.layer_count; ++l) {
        Block b{
            make_attention(d, config.inner_dim(), config.head_count, config.placement, dt, rng),
            make_ffn(config.ffn_variant, d, config.ffn_dim, config.placement.factors_ffn(),
                     config.placement.r, dt, rng),
            Norm::identity_init(config.norm, d, config.norm_eps, dt),
            Norm::identity_init(config.norm, d, config.norm_eps, dt),
            config.order,
        };
        b.attention.position = rope;
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = Norm::identity_init(config.norm, d, config.norm_eps, dt);
    if (!config.tie_embeddings) {
        m.head = random_normal({d, config.vocab_size}, 1.0 / std::sqrt(double(d)), dt, rng);
    }
    return m;
}

std::vector<NamedTensor> Model::parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"tok_emb", token_embedding});
    if (position_embedding.defined()) {
        out.push_back({"pos_emb", position_embedding});
    }
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        blocks[l].collect("blocks." + std::to_string(l), out);
    }
    final_norm.collect("final_norm", out);
    if (head.defined()) {
        out.push_back({"head.w", head});
    }
    return out;
}

std::uint64_t Model::param_count() const {
    std::uint64_t n = token_embedding.numel() + final_norm.param_count();
    if (position_embedding.defined()) {
        n += position_embedding.numel();
    }
    for (const Block& b : blocks) {
        n += b.param_count();
    }
    if (head.defined()) {
        n += head.numel();
    }
    return n;
}

std::size_t Model::factored_count() const {
    std::size_t n = 0;
    for (const Block& b : blocks) {
        n += b.attention.factored_count() + b.ffn.factored_count();
    }
    return n;
}

Tensor Model::logits(std::span<const TokenId> ids, std::size_t batch, std::size_t seq) const {
    if (batch == 0 || seq == 0) {
        throw LengthError("logits need a non-empty batch");
    }
    if (seq > config_.max_seq_len) {
        throw LengthError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                          std::to_string(config_.max_seq_len));
    }
    if (ids.size() != batch * seq) {
        throw DimensionError("expected " + std::to_string(batch * seq) + " token ids, got " +
                             std::to_string(ids.size()));
    }
    Tensor x = embedding(token_embedding, ids);
    if (position_embedding.defined()) {
        std::vector<TokenId> pos(batch * seq);
        for (std::size_t i = 0; i < pos.size(); ++i) {
            pos[i] = static_cast<TokenId>(i % seq);
        }
        x = add(x, embedding(position_embedding, pos));
    }
    for (const Block& b : blocks) {
        x = b.forward(x, batch, seq);
    }
    x = final_norm.forward(x);
    FlopCategory cat("head");
    return head.defined() ? matmul(x, head) : matmul_nt(x, token_embedding);
}

Tensor Model::lm_loss(const TokenBatch& b) const {
    const std::size_t T = b.seq_len;
    if (b.tokens.size() != b.batch * (T + 1)) {
        throw DimensionError("token batch holds " + std::to_string(b.tokens.size()) +
                             " ids, expected " + std::to_string(b.batch * (T + 1)));
    }
    std::vector<TokenId> inputs;
    std::vector<TokenId> targets;
    inputs.reserve(b.batch * T);
    targets.reserve(b.batch * T);
    for (std::size_t r = 0; r < b.batch; ++r) {
        const TokenId* row = b.tokens.data() + r * (T + 1);
        inputs.insert(inputs.end(), row, row + T);
        targets.insert(targets.end(), row + 1, row + T + 1);
    }
    return cross_entropy(logits(inputs, b.batch, T), targets);
}

std::vector<TokenId> Model::generate(std::span<const TokenId> prompt, std::size_t n_tokens,
                                     double temperature, std::uint64_t seed) const {
    if (prompt.empty()) {
        throw LengthError("generation needs a non-empty prompt");
    }
    if (prompt.size() > config_.max_seq_len) {
        throw LengthError("prompt of " + std::to_string(prompt.size()) +
                          " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    NoGradGuard no_grad;
    Rng rng(seed);
    std::vector<TokenId> out(prompt.begin(), prompt.end());
    const std::size_t V = config_.vocab_size;
    for (std::size_t step = 0; step < n_tokens; ++step) {
        const std::size_t len = std::min(out.size(), config_.max_seq_len);
        std::span<const TokenId> context(out.data() + out.size() - len, len);
        const Tensor z = logits(context, 1, len);
        std::vector<double> last(V);
        for (std::size_t v = 0; v < V; ++v) {
            last[v] = z.at((len - 1) * V + v);
        }
        TokenId next = 0;
        if (temperature <= 0.0) {
            next = static_cast<TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
        } else {
            const double peak = *std::max_element(last.begin(), last.end());
            for (double& v : last) {
                v = std::exp((v - peak) / temperature);
            }
            std::discrete_distribution<TokenId> pick(last.begin(), last.end());
            next = pick(rng);
        }
        out.push_back(next);
    }
    return out;
}

void assign_parameters(Model& model, const std::vector<NamedTensor>& source) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& nt : source) {
        by_name[nt.name] = &nt.tensor;
    }
    const auto params = model.parameters();
    if (params.size() != by_name.size()) {
        throw FormatError("parameter table holds " + std::to_string(by_name.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
    }
    for (const auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            throw FormatError("missing parameter '" + p.name + "'");
        }
        const Tensor& src = *it->second;
        if (src.shape() != p.tensor.shape()) {
            throw FormatError("parameter '" + p.name + "' has shape " +
                              shape_to_string(src.shape()) + ", model expects " +
                              shape_to_string(p.tensor.shape()));
        }
        Tensor converted = src.dtype() == p.tensor.dtype() ? src : src.to(p.tensor.dtype());
        Tensor dst = p.tensor;
        visit_dtype(dst.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto from = converted.template data<T>();
            std::copy(from.begin(), from.end(), dst.template data<T>().begin());
        });
    }
}

Model factor_exactly(const Model& dense) {
    const ModelConfig& c = dense.config();
    if (c.placement.mode != PlacementMode::none) {
        throw ContractError("factor_exactly expects a dense model");
    }
    if (c.inner_dim() < c.d_model || c.ffn_dim < c.d_model) {
        throw ContractError("factor_exactly needs inner_dim and ffn_dim >= d_model");
    }
    ModelConfig fc = c;
    fc.placement = PlacementSpec{PlacementMode::all, SublayerSet::all(), c.d_model};
    Model out = dense.clone();
    out.config_ = fc;
    auto factor = [&](LinearMap& map) {
        const auto& w = std::get<DenseLinear>(map).weight();
        map = FactoredLinear::from_dense(w, c.d_model);
    };
    for (Block& b : out.blocks) {
        factor(b.attention.query);
        factor(b.attention.key);
        factor(b.attention.value);
        factor(b.attention.output);
        if (b.ffn.gate) {
            factor(*b.ffn.gate);
        }
        factor(b.ffn.up);
        factor(b.ffn.down);
    }
    return out;
}

Model Model::clone() const {
    Model copy = build_model(config_, 0);
    assign_parameters(copy, parameters());
    return copy;
}

}  // namespace lpa
