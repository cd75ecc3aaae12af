#include "lpa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lpa {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

constexpr std::string_view kMagicStem = "LPACKPT";

template <class T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_string(std::string& out, std::string_view s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

void put_tensor(std::string& out, const std::string& name, const Tensor& t, DType dtype) {
    put_string(out, name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    const Tensor v = t.dtype() == dtype ? t : t.to(dtype);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto data = v.template data<T>();
        out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(T));
    });
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what);
        }
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    template <class T>
    T get(const char* what) {
        T v;
        std::memcpy(&v, take(sizeof(T), what).data(), sizeof(T));
        return v;
    }
    std::string get_string(const char* what) {
        const auto n = get<std::uint32_t>(what);
        return std::string(take(n, what));
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

NamedTensor read_tensor(Reader& in, DType dtype) {
    NamedTensor nt;
    nt.name = in.get_string("tensor name");
    const auto rank = in.get<std::uint8_t>("tensor rank");
    if (rank == 0) {
        throw FormatError("tensor '" + nt.name + "' has rank 0");
    }
    Shape shape(rank);
    for (auto& d : shape) {
        d = in.get<std::uint32_t>("tensor dims");
        if (d == 0) {
            throw FormatError("tensor '" + nt.name + "' has a zero dimension");
        }
    }
    const std::size_t n = shape_numel(shape);
    nt.tensor = Tensor::zeros(shape, dtype, true);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto raw = in.take(n * sizeof(T), "tensor values");
        std::memcpy(nt.tensor.template data<T>().data(), raw.data(), raw.size());
    });
    return nt;
}

}  // namespace

std::string encode_checkpoint(const Model& model, const TrainState* state) {
    const ModelConfig& cfg = model.config();
    std::string record = render_config_record(cfg);
    if (state) {
        record += "state.seed=" + std::to_string(state->seed) + "\n";
        record += "state.step=" + std::to_string(state->step) + "\n";
    }
    const auto params = model.parameters();
    std::size_t count = params.size();
    if (state) {
        count += state->first_moment.size() + state->second_moment.size();
    }

    std::string out(kCheckpointMagic);
    put_string(out, record);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(count));
    for (const auto& p : params) {
        put_tensor(out, p.name, p.tensor, cfg.precision);
    }
    if (state) {
        for (const auto& m : state->first_moment) {
            put_tensor(out, "state.m." + m.name, m.tensor, cfg.precision);
        }
        for (const auto& v : state->second_moment) {
            put_tensor(out, "state.v." + v.name, v.tensor, cfg.precision);
        }
    }
    put<std::uint64_t>(out, fnv1a64(out));
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < kCheckpointMagic.size() ||
        bytes.substr(0, kMagicStem.size()) != kMagicStem) {
        throw FormatError("not a checkpoint (bad magic)");
    }
    if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
        throw VersionError("unsupported checkpoint version '" +
                           std::string(bytes.substr(kMagicStem.size(), 1)) + "' (expected '" +
                           std::string(kCheckpointMagic.substr(kMagicStem.size())) + "')");
    }
    if (bytes.size() < kCheckpointMagic.size() + sizeof(std::uint64_t)) {
        throw FormatError("checkpoint truncated");
    }
    const std::string_view body = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
    if (stored != fnv1a64(body)) {
        throw FormatError("checkpoint checksum mismatch (corrupt or truncated file)");
    }

    Reader in(body.substr(kCheckpointMagic.size()));
    const std::string record = in.get_string("config record");
    std::string config_lines;
    std::optional<TrainState> state;
    {
        std::istringstream lines(record);
        std::string line;
        while (std::getline(lines, line)) {
            if (line.rfind("state.", 0) == 0) {
                if (!state) {
                    state.emplace();
                }
                const auto eq = line.find('=');
                if (eq == std::string::npos) {
                    throw FormatError("bad state line '" + line + "'");
                }
                const std::string key = line.substr(0, eq);
                const std::string value = line.substr(eq + 1);
                if (key == "state.step") {
                    state->step = parse_size(key, value);
                } else if (key == "state.seed") {
                    state->seed = parse_size(key, value);
                } else {
                    throw FormatError("unknown state key '" + key + "'");
                }
            } else {
                config_lines += line + "\n";
            }
        }
    }
    ModelConfig cfg;
    try {
        cfg = parse_config_record(config_lines);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config record: ") + e.what());
    }

    const auto count = in.get<std::uint32_t>("tensor count");
    std::vector<NamedTensor> params;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor nt = read_tensor(in, cfg.precision);
        if (nt.name.rfind("state.m.", 0) == 0 || nt.name.rfind("state.v.", 0) == 0) {
            if (!state) {
                throw FormatError("optimizer tensor '" + nt.name + "' without state keys");
            }
            const bool first = nt.name[6] == 'm';
            nt.name = nt.name.substr(8);
            (first ? state->first_moment : state->second_moment).push_back(std::move(nt));
        } else {
            params.push_back(std::move(nt));
        }
    }
    if (!in.done()) {
        throw FormatError("trailing bytes after the tensor table");
    }

    Model model = build_model(cfg, 0);
    assign_parameters(model, params);
    return Checkpoint{std::move(model), std::move(state)};
}

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const TrainState* state) {
    const std::string bytes = encode_checkpoint(model, state);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("failed writing '" + path.string() + "'");
    }
}

Checkpoint load_checkpoint_full(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return decode_checkpoint(buf.str());
}

Model load_checkpoint(const std::filesystem::path& path) {
    return load_checkpoint_full(path).model;
}

}  // namespace lpa
