#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "vlmo/backbone/config.hpp"
#include "vlmo/backbone/params.hpp"

namespace vlmo::cli {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "VLMO" | u32 version | u64 metadata length | metadata JSON | f32 payload.
// Metadata holds config, stage, step, seed, free-form extras and the
// manifest name -> {dtype, shape, offset, length} in parameter order.
struct Checkpoint {
    model::ModelConfig config;
    std::string stage = "init";
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    nlohmann::ordered_json extra = nlohmann::ordered_json::object();
    model::ParameterStore<float> params;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws DataError on bad magic, unsupported version, truncation or a
// manifest inconsistent with the payload.
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::ordered_json config_to_json(const model::ModelConfig& c);
model::ModelConfig config_from_json(const nlohmann::ordered_json& j);

// Deep copy; tensors are not shared with the source.
Checkpoint clone(const Checkpoint& ckpt);

}  // namespace vlmo::cli
