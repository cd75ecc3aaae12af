#include "lpa/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace lpa {

namespace {

template <class E, std::size_t N>
E parse_enum(const std::string& s, const std::pair<const char*, E> (&table)[N], const char* what) {
    for (const auto& [name, value] : table) {
        if (s == name) {
            return value;
        }
    }
    std::string expected;
    for (const auto& [name, value] : table) {
        expected += expected.empty() ? name : std::string("|") + name;
    }
    throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected " + expected + ")");
}

constexpr std::pair<const char*, PlacementMode> kModes[] = {{"none", PlacementMode::none},
                                                             {"attn", PlacementMode::attn},
                                                             {"ffn", PlacementMode::ffn},
                                                             {"all", PlacementMode::all}};
constexpr std::pair<const char*, NormKind> kNorms[] = {{"layer", NormKind::layer},
                                                        {"rms", NormKind::rms}};
constexpr std::pair<const char*, BlockOrder> kOrders[] = {{"setting1", BlockOrder::setting1},
                                                           {"setting2", BlockOrder::setting2},
                                                           {"postnorm", BlockOrder::postnorm}};
constexpr std::pair<const char*, FfnVariant> kFfns[] = {{"relu2", FfnVariant::relu2},
                                                         {"swiglu3", FfnVariant::swiglu3}};
constexpr std::pair<const char*, PositionKind> kPositions[] = {
    {"learned", PositionKind::learned}, {"rotary", PositionKind::rotary}};

template <class E, std::size_t N>
std::string enum_name(E v, const std::pair<const char*, E> (&table)[N]) {
    for (const auto& [name, value] : table) {
        if (value == v) {
            return name;
        }
    }
    return "?";
}

}  // namespace

std::string to_string(PlacementMode v) { return enum_name(v, kModes); }
std::string to_string(NormKind v) { return enum_name(v, kNorms); }
std::string to_string(BlockOrder v) { return enum_name(v, kOrders); }
std::string to_string(FfnVariant v) { return enum_name(v, kFfns); }
std::string to_string(PositionKind v) { return enum_name(v, kPositions); }

PlacementMode parse_placement_mode(const std::string& s) {
    return parse_enum(s, kModes, "placement mode");
}
NormKind parse_norm_kind(const std::string& s) { return parse_enum(s, kNorms, "norm"); }
BlockOrder parse_block_order(const std::string& s) { return parse_enum(s, kOrders, "order"); }
FfnVariant parse_ffn_variant(const std::string& s) { return parse_enum(s, kFfns, "ffn variant"); }
PositionKind parse_position_kind(const std::string& s) {
    return parse_enum(s, kPositions, "position");
}

SublayerSet SublayerSet::parse(const std::string& text) {
    SublayerSet set;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item == "Q") {
            set.insert(Sublayer::query);
        } else if (item == "K") {
            set.insert(Sublayer::key);
        } else if (item == "V") {
            set.insert(Sublayer::value);
        } else if (item == "O") {
            set.insert(Sublayer::output);
        } else if (!item.empty()) {
            throw ConfigError("unknown attention sublayer '" + item + "' (expected Q, K, V, O)");
        }
    }
    return set;
}

std::size_t SublayerSet::size() const {
    std::size_t n = 0;
    for (unsigned i = 0; i < 4; ++i) {
        n += (bits_ >> i) & 1u;
    }
    return n;
}

std::string SublayerSet::to_string() const {
    static constexpr const char* kNames[] = {"Q", "K", "V", "O"};
    std::string out;
    for (unsigned i = 0; i < 4; ++i) {
        if ((bits_ >> i) & 1u) {
            out += out.empty() ? kNames[i] : std::string(",") + kNames[i];
        }
    }
    return out;
}

bool PlacementSpec::factors(Sublayer s) const {
    return (mode == PlacementMode::attn || mode == PlacementMode::all) &&
           attn_sublayers.contains(s);
}

bool PlacementSpec::factors_ffn() const {
    return mode == PlacementMode::ffn || mode == PlacementMode::all;
}

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& invariant) {
        if (!ok) {
            throw ConfigError("invalid model config: " + invariant);
        }
    };
    require(vocab_size > 0, "vocab_size > 0");
    require(d_model > 0, "d_model > 0");
    require(head_count > 0, "head_count > 0");
    require(ffn_dim > 0, "ffn_dim > 0");
    require(layer_count > 0, "layer_count > 0");
    require(max_seq_len > 0, "max_seq_len > 0");
    require(inner_dim() % head_count == 0, "attn_inner_dim (" + std::to_string(inner_dim()) +
                                               ") divisible by head_count (" +
                                               std::to_string(head_count) + ")");
    require(position != PositionKind::rotary || head_dim() % 2 == 0,
            "rotary positions need an even head dim");
    require(norm_eps > 0, "norm_eps > 0");
    require(rope_base > 0, "rope_base > 0");
    if (placement.mode != PlacementMode::none) {
        require(placement.r > 0, "placement r > 0 when mode != none");
    }
    if (placement.mode == PlacementMode::attn || placement.mode == PlacementMode::all) {
        require(!placement.attn_sublayers.empty(), "attn_sublayers non-empty for attn/all");
    }
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
    std::size_t out = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), out);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size()) {
        throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + value +
                          "'");
    }
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    double out = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), out);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size()) {
        throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true") {
        return true;
    }
    if (value == "false") {
        return false;
    }
    throw ConfigError("key '" + key + "': expected true|false, got '" + value + "'");
}

ConfigFields model_fields(const ModelConfig& c) {
    return {
        {"vocab_size", std::to_string(c.vocab_size)},
        {"d_model", std::to_string(c.d_model)},
        {"head_count", std::to_string(c.head_count)},
        {"ffn_dim", std::to_string(c.ffn_dim)},
        {"layer_count", std::to_string(c.layer_count)},
        {"max_seq_len", std::to_string(c.max_seq_len)},
        {"norm", to_string(c.norm)},
        {"order", to_string(c.order)},
        {"ffn_variant", to_string(c.ffn_variant)},
        {"attn_inner_dim", std::to_string(c.attn_inner_dim)},
        {"position", to_string(c.position)},
        {"tie_embeddings", c.tie_embeddings ? "true" : "false"},
        {"precision", to_string(c.precision)},
        {"norm_eps", format_double(c.norm_eps)},
        {"rope_base", format_double(c.rope_base)},
    };
}

ConfigFields placement_fields(const PlacementSpec& p) {
    return {
        {"mode", to_string(p.mode)},
        {"attn_sublayers", p.attn_sublayers.to_string()},
        {"r", std::to_string(p.r)},
    };
}

void apply_model_field(ModelConfig& c, const std::string& key, const std::string& value) {
    if (key == "vocab_size") {
        c.vocab_size = parse_size(key, value);
    } else if (key == "d_model") {
        c.d_model = parse_size(key, value);
    } else if (key == "head_count") {
        c.head_count = parse_size(key, value);
    } else if (key == "ffn_dim") {
        c.ffn_dim = parse_size(key, value);
    } else if (key == "layer_count") {
        c.layer_count = parse_size(key, value);
    } else if (key == "max_seq_len") {
        c.max_seq_len = parse_size(key, value);
    } else if (key == "norm") {
        c.norm = parse_norm_kind(value);
    } else if (key == "order") {
        c.order = parse_block_order(value);
    } else if (key == "ffn_variant") {
        c.ffn_variant = parse_ffn_variant(value);
    } else if (key == "attn_inner_dim") {
        c.attn_inner_dim = parse_size(key, value);
    } else if (key == "position") {
        c.position = parse_position_kind(value);
    } else if (key == "tie_embeddings") {
        c.tie_embeddings = parse_bool(key, value);
    } else if (key == "precision") {
        c.precision = parse_dtype(value);
    } else if (key == "norm_eps") {
        c.norm_eps = parse_real(key, value);
    } else if (key == "rope_base") {
        c.rope_base = parse_real(key, value);
    } else {
        throw ConfigError("unknown model key '" + key + "'");
    }
}

void apply_placement_field(PlacementSpec& p, const std::string& key, const std::string& value) {
    if (key == "mode") {
        p.mode = parse_placement_mode(value);
    } else if (key == "attn_sublayers") {
        p.attn_sublayers = SublayerSet::parse(value);
    } else if (key == "r") {
        p.r = parse_size(key, value);
    } else {
        throw ConfigError("unknown placement key '" + key + "'");
    }
}

std::string render_config_record(const ModelConfig& cfg) {
    std::map<std::string, std::string> sorted;
    for (auto& [k, v] : model_fields(cfg)) {
        sorted[k] = v;
    }
    for (auto& [k, v] : placement_fields(cfg.placement)) {
        sorted["placement." + k] = v;
    }
    std::string out;
    for (const auto& [k, v] : sorted) {
        out += k + "=" + v + "\n";
    }
    return out;
}

ModelConfig parse_config_record(const std::string& text) {
    ModelConfig cfg;
    std::stringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("config record line without '=': " + line);
        }
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key.rfind("placement.", 0) == 0) {
            apply_placement_field(cfg.placement, key.substr(10), value);
        } else {
            apply_model_field(cfg, key, value);
        }
    }
    cfg.validate();
    return cfg;
}

namespace {

ModelConfig published_small(std::size_t d, std::size_t heads, std::size_t ffn, std::size_t layers,
                           std::size_t seq, bool setting1) {
    ModelConfig c;
    c.vocab_size = 32000;
    c.d_model = d;
    c.head_count = heads;
    c.ffn_dim = ffn;
    c.layer_count = layers;
    c.max_seq_len = seq;
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
    c.precision = DType::f32;
    return c;
}

ModelConfig with_lpa(ModelConfig c, std::size_t r) {
    c.placement.mode = PlacementMode::attn;
    c.placement.attn_sublayers = SublayerSet::all();
    c.placement.r = r;
    return c;
}

std::map<std::string, ModelConfig> build_presets() {
    std::map<std::string, ModelConfig> p;

    ModelConfig desk;
    desk.precision = DType::f32;
    p["desk"] = desk;
    p["desk-lpa-r16"] = with_lpa(desk, 16);

    ModelConfig desk1 = desk;
    desk1.norm = NormKind::layer;
    desk1.order = BlockOrder::setting1;
    desk1.ffn_variant = FfnVariant::relu2;
    desk1.position = PositionKind::learned;
    p["desk-setting1"] = desk1;
    p["desk-setting1-lpa-r16"] = with_lpa(desk1, 16);

    ModelConfig bench = desk;
    bench.d_model = 512;
    bench.head_count = 8;
    bench.ffn_dim = 2048;
    bench.max_seq_len = 256;
    p["bench-d512"] = bench;
    p["bench-d512-lpa-r64"] = with_lpa(bench, 64);

    p["setting1-135m"] = published_small(768, 8, 3072, 12, 512, true);
    p["setting1-lpa-125m-r256"] = with_lpa(p["setting1-135m"], 256);
    p["setting1-369m"] = published_small(1024, 8, 4096, 24, 1024, true);
    p["setting1-lpa-319m-r256"] = with_lpa(p["setting1-369m"], 256);
    p["setting2-134m"] = published_small(768, 12, 2048, 12, 256, false);
    p["setting2-lpa-115m-r128"] = with_lpa(p["setting2-134m"], 128);
    p["setting2-368m"] = published_small(1024, 16, 2736, 24, 512, false);
    p["setting2-lpa-318m-r256"] = with_lpa(p["setting2-368m"], 256);

    // Large models: pre-norm with the 2-matrix FFN; see README for how the
    // printed totals pin these choices.
    ModelConfig big = published_small(4096, 32, 14436, 16, 4096, true);
    big.order = BlockOrder::setting2;
    big.position = PositionKind::rotary;
    p["3b-same-dim"] = big;
    ModelConfig same_param = big;
    same_param.layer_count = 12;
    p["3b-same-param"] = same_param;
    p["3b-lpa-r512"] = with_lpa(big, 512);
    return p;
}

}  // namespace

const std::map<std::string, ModelConfig>& presets() {
    static const std::map<std::string, ModelConfig> table = build_presets();
    return table;
}

ModelConfig preset(const std::string& name) {
    const auto& table = presets();
    auto it = table.find(name);
    if (it == table.end()) {
        throw ConfigError("unknown preset '" + name + "'");
    }
    return it->second;
}

std::vector<std::string> preset_names() {
    std::vector<std::string> names;
    for (const auto& [name, cfg] : presets()) {
        names.push_back(name);
    }
    return names;
}

}  // namespace lpa
