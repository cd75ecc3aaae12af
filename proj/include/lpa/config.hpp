#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lpa/tensor.hpp"

namespace lpa {

enum class PlacementMode : std::uint8_t { none, attn, ffn, all };
enum class NormKind : std::uint8_t { layer, rms };
/// setting1: y = x + Norm(Sub(x)); setting2: y = x + Sub(Norm(x));
/// postnorm: y = Norm(x + Sub(x)).
enum class BlockOrder : std::uint8_t { setting1, setting2, postnorm };
enum class FfnVariant : std::uint8_t { relu2, swiglu3 };
enum class PositionKind : std::uint8_t { learned, rotary };
enum class Sublayer : std::uint8_t { query, key, value, output };

std::string to_string(PlacementMode v);
std::string to_string(NormKind v);
std::string to_string(BlockOrder v);
std::string to_string(FfnVariant v);
std::string to_string(PositionKind v);
PlacementMode parse_placement_mode(const std::string& s);
NormKind parse_norm_kind(const std::string& s);
BlockOrder parse_block_order(const std::string& s);
FfnVariant parse_ffn_variant(const std::string& s);
PositionKind parse_position_kind(const std::string& s);

/// Subset of the four attention sublayers, rendered as e.g. "Q,K,V,O".
class SublayerSet {
public:
    SublayerSet() = default;
    static SublayerSet all() { return SublayerSet(0b1111); }
    static SublayerSet parse(const std::string& text);

    bool contains(Sublayer s) const { return (bits_ >> static_cast<unsigned>(s)) & 1u; }
    SublayerSet& insert(Sublayer s) {
        bits_ |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(s));
        return *this;
    }
    std::size_t size() const;
    bool empty() const { return bits_ == 0; }
    std::string to_string() const;

    friend bool operator==(SublayerSet, SublayerSet) = default;

private:
    explicit SublayerSet(std::uint8_t bits) : bits_(bits) {}
    std::uint8_t bits_ = 0;
};

struct PlacementSpec {
    PlacementMode mode = PlacementMode::none;
    SublayerSet attn_sublayers = SublayerSet::all();
    std::size_t r = 0;

    bool factors(Sublayer s) const;
    bool factors_ffn() const;

    friend bool operator==(const PlacementSpec&, const PlacementSpec&) = default;
};

inline constexpr std::size_t kFfnMatrixCountRelu2 = 2;
inline constexpr std::size_t kFfnMatrixCountSwiglu3 = 3;

struct ModelConfig {
    std::size_t vocab_size = 257;
    std::size_t d_model = 64;
    std::size_t head_count = 4;
    std::size_t ffn_dim = 256;
    std::size_t layer_count = 2;
    std::size_t max_seq_len = 128;
    NormKind norm = NormKind::rms;
    BlockOrder order = BlockOrder::setting2;
    FfnVariant ffn_variant = FfnVariant::swiglu3;
    PlacementSpec placement;
    /// Width of the Q/K/V outputs and O input; 0 means d_model.
    std::size_t attn_inner_dim = 0;
    PositionKind position = PositionKind::rotary;
    bool tie_embeddings = false;
    DType precision = DType::f64;
    double norm_eps = 1e-5;
    double rope_base = 10000.0;

    std::size_t inner_dim() const { return attn_inner_dim == 0 ? d_model : attn_inner_dim; }
    std::size_t head_dim() const { return inner_dim() / head_count; }
    std::size_t ffn_matrix_count() const {
        return ffn_variant == FfnVariant::relu2 ? kFfnMatrixCountRelu2 : kFfnMatrixCountSwiglu3;
    }

    /// Throws ConfigError naming the first violated invariant.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using ConfigFields = std::vector<std::pair<std::string, std::string>>;

/// [model] section fields in declaration order.
ConfigFields model_fields(const ModelConfig& cfg);
/// [placement] section fields.
ConfigFields placement_fields(const PlacementSpec& placement);
/// Applies one [model] key; ConfigError on unknown key or bad value.
void apply_model_field(ModelConfig& cfg, const std::string& key, const std::string& value);
void apply_placement_field(PlacementSpec& placement, const std::string& key,
                           const std::string& value);

/// Canonical checkpoint record: sorted "key=value" lines, placement keys
/// prefixed with "placement.".
std::string render_config_record(const ModelConfig& cfg);
ModelConfig parse_config_record(const std::string& text);

/// Compiled-in presets for the published 130M-3B configurations plus the desk
/// presets used for CPU-scale training.
const std::map<std::string, ModelConfig>& presets();
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

/// Decimal formatting helpers shared by reports.
std::string format_double(double v);
std::size_t parse_size(const std::string& key, const std::string& value);
double parse_real(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

}  // namespace lpa
