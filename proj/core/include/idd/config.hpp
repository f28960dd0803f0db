#pragma once

// Top-level run configuration shared by every CLI command, and the run
// manifest. Missing keys take their defaults; to_json always writes every
// key, so a manifest is a complete config on its own.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idd/data_synth.hpp"
#include "idd/models.hpp"
#include "idd/position.hpp"
#include "idd/trainer.hpp"

namespace idd {

namespace data {
void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);
}  // namespace data

namespace position {
void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);
}  // namespace position

std::string version();

struct RunConfig {
  data::DatasetSpec dataset;
  std::string data_dir = "data";
  models::ModelSpec teacher_model = models::ModelSpec::default_teacher(6);
  train::TrainConfig teacher_train;
  models::ModelSpec student_model = models::ModelSpec::default_student(6);
  train::TrainConfig student_train;
  position::PretrainConfig poshead;
  std::string teacher_checkpoint = "runs/teacher/model.iddc";
  std::string teacher_head_checkpoint = "runs/poshead/teacher_head.iddc";
  std::string preset = "full-idd";
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string checkpoint;     // evaluate: model to score
  std::string split = "val";  // evaluate: "train", "val" or "both"

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Reads a config file or a manifest (whose "config" member is used).
RunConfig load_config(const std::filesystem::path& path);

struct Manifest {
  std::string command;
  std::string config_path;
  RunConfig config;
  std::string out_dir;
  std::string version;
  std::uint64_t seed = 0;
  bool deterministic = true;
};

void to_json(nlohmann::json& j, const Manifest& m);
void write_manifest(const std::filesystem::path& out_dir, const Manifest& m);

}  // namespace idd
