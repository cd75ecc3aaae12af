#pragma once

// Binary checkpoint layout (all integers little-endian):
//   "LPACKPT1"
//   u32 length + config record (sorted key=value lines)
//   u32 tensor count
//   per tensor: u32 length + name, u8 rank, rank × u32 dims, raw values at the
//               config precision in row-major order
//   u64 FNV-1a over every preceding byte
// Optimizer state, when present, travels as extra "state.*" config lines and
// "state.m.<param>" / "state.v.<param>" tensors.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "lpa/model.hpp"

namespace lpa {

inline constexpr std::string_view kCheckpointMagic = "LPACKPT1";

struct TrainState {
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::vector<NamedTensor> first_moment;   // same names as the parameters
    std::vector<NamedTensor> second_moment;
};

struct Checkpoint {
    Model model;
    std::optional<TrainState> state;
};

std::uint64_t fnv1a64(std::string_view bytes);

std::string encode_checkpoint(const Model& model, const TrainState* state = nullptr);
/// FormatError on bad magic, truncation, bad checksum or structure mismatch;
/// VersionError on a recognised magic with an unsupported version digit.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const TrainState* state = nullptr);
Model load_checkpoint(const std::filesystem::path& path);
Checkpoint load_checkpoint_full(const std::filesystem::path& path);

}  // namespace lpa
