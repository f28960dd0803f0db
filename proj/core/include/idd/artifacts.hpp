#pragma once

// Model and position-head checkpoints on top of the generic container.

#include <filesystem>

#include <nlohmann/json.hpp>

#include "idd/checkpoint.hpp"
#include "idd/models.hpp"
#include "idd/position.hpp"

namespace idd {

/// Header: {"kind": "model", "spec", "init_seed", ...extra}. Block "params".
void save_model(const std::filesystem::path& path, const models::Model<float>& model,
                const nlohmann::json& extra = nlohmann::json::object());

/// Throws FormatError if the file is not a model checkpoint, or if
/// expected_classes is non-negative and differs from the stored spec.
models::Model<float> load_model(const std::filesystem::path& path, int expected_classes = -1);

/// Header: {"kind": "position_head", "in_channels", "hidden", "seed", ...extra}.
void save_position_head(const std::filesystem::path& path, const position::PositionHead<float>& head,
                        const nlohmann::json& extra = nlohmann::json::object());
position::PositionHead<float> load_position_head(const std::filesystem::path& path);

}  // namespace idd
