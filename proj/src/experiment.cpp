#include "lpa/experiment.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace lpa {

ExperimentConfig default_experiment() {
    ExperimentConfig e;
    e.model = preset("desk");
    return e;
}

ConfigFields train_fields(const TrainConfig& c) {
    return {
        {"learning_rate", format_double(c.learning_rate)},
        {"warmup_fraction", format_double(c.warmup_fraction)},
        {"final_lr_fraction", format_double(c.final_lr_fraction)},
        {"batch_size", std::to_string(c.batch_size)},
        {"seq_len", std::to_string(c.seq_len)},
        {"total_steps", std::to_string(c.total_steps)},
        {"beta1", format_double(c.beta1)},
        {"beta2", format_double(c.beta2)},
        {"eps", format_double(c.eps)},
        {"weight_decay", format_double(c.weight_decay)},
        {"grad_clip_norm", format_double(c.grad_clip_norm)},
        {"seed", std::to_string(c.seed)},
        {"eval_interval", std::to_string(c.eval_interval)},
        {"eval_max_windows", std::to_string(c.eval_max_windows)},
        {"precision", to_string(c.precision)},
    };
}

void apply_train_field(TrainConfig& c, const std::string& key, const std::string& value) {
    if (key == "learning_rate") {
        c.learning_rate = parse_real(key, value);
    } else if (key == "warmup_fraction") {
        c.warmup_fraction = parse_real(key, value);
    } else if (key == "final_lr_fraction") {
        c.final_lr_fraction = parse_real(key, value);
    } else if (key == "batch_size") {
        c.batch_size = parse_size(key, value);
    } else if (key == "seq_len") {
        c.seq_len = parse_size(key, value);
    } else if (key == "total_steps") {
        c.total_steps = parse_size(key, value);
    } else if (key == "beta1") {
        c.beta1 = parse_real(key, value);
    } else if (key == "beta2") {
        c.beta2 = parse_real(key, value);
    } else if (key == "eps") {
        c.eps = parse_real(key, value);
    } else if (key == "weight_decay") {
        c.weight_decay = parse_real(key, value);
    } else if (key == "grad_clip_norm") {
        c.grad_clip_norm = parse_real(key, value);
    } else if (key == "seed") {
        c.seed = parse_size(key, value);
    } else if (key == "eval_interval") {
        c.eval_interval = parse_size(key, value);
    } else if (key == "eval_max_windows") {
        c.eval_max_windows = parse_size(key, value);
    } else if (key == "precision") {
        c.precision = parse_dtype(value);
    } else {
        throw ConfigError("unknown train key '" + key + "'");
    }
}

namespace {

ConfigFields data_fields(const DataConfig& d) {
    return {
        {"corpus", d.corpus.string()},
        {"train_fraction", format_double(d.fractions.train)},
        {"valid_fraction", format_double(d.fractions.valid)},
        {"test_fraction", format_double(d.fractions.test)},
    };
}

void apply_data_field(DataConfig& d, const std::string& key, const std::string& value) {
    if (key == "corpus") {
        d.corpus = value;
    } else if (key == "train_fraction") {
        d.fractions.train = parse_real(key, value);
    } else if (key == "valid_fraction") {
        d.fractions.valid = parse_real(key, value);
    } else if (key == "test_fraction") {
        d.fractions.test = parse_real(key, value);
    } else {
        throw ConfigError("unknown data key '" + key + "'");
    }
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return "";
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

struct Entry {
    std::string section;
    std::string key;
    std::string value;
    std::size_t line;
};

}  // namespace

ExperimentConfig parse_experiment(const std::string& text) {
    static const std::set<std::string> kSections = {"model", "placement", "train", "data"};
    std::vector<Entry> entries;
    std::set<std::pair<std::string, std::string>> seen;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) {
            continue;
        }
        const std::string where = "line " + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(where + "malformed section header '" + line + "'");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (!kSections.count(section)) {
                throw ConfigError(where + "unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(where + "expected 'key = value', got '" + line + "'");
        }
        if (section.empty()) {
            throw ConfigError(where + "key outside of any section");
        }
        Entry e{section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no};
        if (!seen.insert({e.section, e.key}).second) {
            throw ConfigError(where + "duplicate key '" + e.key + "' in [" + e.section + "]");
        }
        entries.push_back(std::move(e));
    }

    ExperimentConfig cfg = default_experiment();
    for (const auto& e : entries) {
        if (e.section == "model" && e.key == "preset") {
            cfg.model = preset(e.value);
        }
    }
    for (const auto& e : entries) {
        try {
            if (e.section == "model") {
                if (e.key != "preset") {
                    apply_model_field(cfg.model, e.key, e.value);
                }
            } else if (e.section == "placement") {
                apply_placement_field(cfg.model.placement, e.key, e.value);
            } else if (e.section == "train") {
                apply_train_field(cfg.train, e.key, e.value);
            } else {
                apply_data_field(cfg.data, e.key, e.value);
            }
        } catch (const ConfigError& err) {
            throw ConfigError("line " + std::to_string(e.line) + ": " + err.what());
        }
    }
    cfg.model.validate();
    cfg.train.validate();
    cfg.data.fractions.validate();
    return cfg;
}

std::string render_experiment(const ExperimentConfig& cfg) {
    std::string out;
    auto section = [&](const char* name, const ConfigFields& fields) {
        out += out.empty() ? "" : "\n";
        out += std::string("[") + name + "]\n";
        for (const auto& [k, v] : fields) {
            out += k + " = " + v + "\n";
        }
    };
    section("model", model_fields(cfg.model));
    section("placement", placement_fields(cfg.model.placement));
    section("train", train_fields(cfg.train));
    section("data", data_fields(cfg.data));
    return out;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config '" + path.string() + "'");
    }
    std::stringstream buf;
    buf << in.rdbuf();
    ExperimentConfig cfg = parse_experiment(buf.str());
    if (!cfg.data.corpus.empty() && cfg.data.corpus.is_relative()) {
        cfg.data.corpus = path.parent_path() / cfg.data.corpus;
    }
    return cfg;
}

void save_experiment(const ExperimentConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw ConfigError("cannot write config '" + path.string() + "'");
    }
    out << render_experiment(cfg);
}

}  // namespace lpa
