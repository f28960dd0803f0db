#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idd/data_synth.hpp"
#include "idd/kd_losses.hpp"
#include "idd/metrics.hpp"
#include "idd/models.hpp"
#include "idd/position.hpp"

namespace idd::train {

struct TrainConfig {
  int total_iters = 4000;
  int batch_size = 8;
  double base_lr = 0.01;
  double lr_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double grad_clip = 5.0;  // global gradient norm cap, 0 disables
  std::uint64_t seed = 1;
  kd::LossWeights weights;
  int eval_every = 500;
  int student_head_hidden = 8;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// base_lr·(1 − iter/total_iters)^lr_power. Throws std::invalid_argument
/// outside [0, total_iters].
double poly_lr(int iter, const TrainConfig& config);

/// Independent sub-seeds of a run seed (model init, data order, heads).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Dataset index used at slot `slot` of iteration `iter`. Each epoch is a
/// fresh permutation; the sequence depends only on (seed, n, iter, slot).
class DataOrder {
 public:
  DataOrder(std::uint64_t seed, std::size_t n);
  std::size_t at(std::int64_t position);

 private:
  std::uint64_t seed_;
  std::size_t n_;
  std::int64_t epoch_ = -1;
  std::vector<std::size_t> perm_;
};

struct EvalRecord {
  int iteration = 0;
  double miou = 0.0;
  std::vector<std::optional<double>> per_class_iou;
  kd::LossBreakdown loss_mean;  // over the steps since the previous eval

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

nlohmann::json to_json(const EvalRecord& r);
EvalRecord eval_record_from_json(const nlohmann::json& j);

struct RunRecord {
  std::string kind;  // "teacher", "supervised" or "distill"
  nlohmann::json config;
  std::vector<EvalRecord> evals;
  std::string checkpoint;  // final model checkpoint, empty if not written
  models::ParamCount params;
  double wall_seconds = 0.0;
};

nlohmann::json summary_json(const RunRecord& r);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: no files are written
  bool resume = false;
  std::function<void(int, const kd::LossBreakdown&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

/// Raised on a non-finite loss after the diagnostic snapshot is written.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  models::Model<float> model;
  RunRecord record;
  std::optional<position::PositionHead<float>> student_head;
};

/// L_tar only. The weights in config must be all off.
TrainResult train_supervised(const TrainConfig& config, const models::ModelSpec& spec,
                             std::span<const data::Sample> train, std::span<const data::Sample> val,
                             const RunOptions& options = {});

/// train_supervised followed by freezing; record kind "teacher".
TrainResult train_teacher(const TrainConfig& config, const models::ModelSpec& spec,
                          std::span<const data::Sample> train, std::span<const data::Sample> val,
                          const RunOptions& options = {});

/// Student training on the composite objective. The teacher (and teacher_head
/// when given) must be frozen; L_pi with the teacher reference needs
/// teacher_head. Teacher parameters are never modified.
TrainResult distill_student(const TrainConfig& config, const models::ModelSpec& student_spec,
                            std::span<const data::Sample> train, std::span<const data::Sample> val,
                            models::Model<float>& teacher, position::PositionHead<float>* teacher_head,
                            const RunOptions& options = {});

struct AblationRow {
  std::string name;  // preset name, or "teacher"
  bool skd = false, cw = false, id = false, pi = false;
  double miou = 0.0;  // mean over seeds
  std::int64_t params = 0;
  std::vector<double> seed_miou;
  std::vector<std::optional<double>> seed_distance;  // mean_interclass_distance per seed
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  // 6 student presets, then the teacher
};

nlohmann::json to_json(const AblationTable& t);
AblationTable ablation_from_json(const nlohmann::json& j);
std::string render_ablation_text(const AblationTable& t);

struct AblationOptions {
  std::filesystem::path out_dir;  // per-row subdirectories when set
  int workers = 1;                // > 1 forks one process per (row, seed)
  std::function<void(const std::string&, std::uint64_t)> on_run;
};

AblationTable run_ablation(const TrainConfig& base, const models::ModelSpec& student_spec,
                           std::span<const data::Sample> train, std::span<const data::Sample> val,
                           models::Model<float>& teacher, position::PositionHead<float>* teacher_head,
                           std::span<const std::uint64_t> seeds, const AblationOptions& options = {});

}  // namespace idd::train
