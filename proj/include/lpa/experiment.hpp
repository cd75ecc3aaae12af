#pragma once

// Experiment files: "[section]" headers followed by "key = value" lines, with
// '#' comments. Sections are [model], [placement], [train] and [data]; keys are
// the field names of the corresponding config structs. A "preset = <name>" key
// in [model] is expanded first, whatever its position, and the remaining keys
// override it.

#include <filesystem>
#include <string>

#include "lpa/training.hpp"

namespace lpa {

/// Desk preset, default training settings and a 0.9/0.05/0.05 split.
ExperimentConfig default_experiment();

/// ConfigError on unknown sections or keys, duplicates, malformed lines, or a
/// config that fails validation.
ExperimentConfig parse_experiment(const std::string& text);
/// Every field written explicitly; parse_experiment(render_experiment(c)) == c.
std::string render_experiment(const ExperimentConfig& cfg);

/// Reads a file; a relative corpus path is resolved against the file's directory.
ExperimentConfig load_experiment(const std::filesystem::path& path);
void save_experiment(const ExperimentConfig& cfg, const std::filesystem::path& path);

ConfigFields train_fields(const TrainConfig& cfg);
void apply_train_field(TrainConfig& cfg, const std::string& key, const std::string& value);

}  // namespace lpa
