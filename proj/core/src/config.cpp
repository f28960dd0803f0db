#include "idd/config.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#ifndef IDD_VERSION
#define IDD_VERSION "0.0.0"
#endif

namespace idd {

namespace data {

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"num_classes", s.num_classes}, {"height", s.height},       {"width", s.width},
                     {"train_count", s.train_count}, {"val_count", s.val_count}, {"seed", s.seed},
                     {"ignore_fraction", s.ignore_fraction}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  const DatasetSpec d;
  s.num_classes = j.value("num_classes", d.num_classes);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.train_count = j.value("train_count", d.train_count);
  s.val_count = j.value("val_count", d.val_count);
  s.seed = j.value("seed", d.seed);
  s.ignore_fraction = j.value("ignore_fraction", d.ignore_fraction);
}

}  // namespace data

namespace position {

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"iters", c.iters},         {"batch_size", c.batch_size},       {"lr", c.lr},
                     {"momentum", c.momentum},   {"weight_decay", c.weight_decay},   {"grad_clip", c.grad_clip},
                     {"hidden", c.hidden},
                     {"seed", c.seed},           {"eval_samples", c.eval_samples}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  const PretrainConfig d;
  c.iters = j.value("iters", d.iters);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.hidden = j.value("hidden", d.hidden);
  c.seed = j.value("seed", d.seed);
  c.eval_samples = j.value("eval_samples", d.eval_samples);
}

}  // namespace position

std::string version() { return IDD_VERSION; }

void RunConfig::validate() const {
  dataset.validate();
  teacher_model.validate();
  student_model.validate();
  teacher_train.validate();
  student_train.validate();
  const int n = dataset.num_classes;
  if (teacher_model.num_classes != n || student_model.num_classes != n) {
    throw std::invalid_argument("config: model num_classes must equal dataset.num_classes (" + std::to_string(n) +
                                ")");
  }
  if (teacher_train.weights.any_enabled()) {
    throw std::invalid_argument("config: teacher_train.weights must not enable distillation terms");
  }
  kd::LossWeights::preset(preset, student_train.weights);
  if (seeds.empty()) throw std::invalid_argument("config: seeds must not be empty");
  if (split != "train" && split != "val" && split != "both") {
    throw std::invalid_argument("config: split must be train, val or both (got '" + split + "')");
  }
  if (poshead.iters <= 0 || poshead.batch_size <= 0 || !(poshead.lr > 0) || poshead.hidden <= 0) {
    throw std::invalid_argument("config: poshead iters, batch_size, lr and hidden must be positive");
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"dataset", c.dataset},
                     {"data_dir", c.data_dir},
                     {"teacher_model", c.teacher_model},
                     {"teacher_train", c.teacher_train},
                     {"student_model", c.student_model},
                     {"student_train", c.student_train},
                     {"poshead", c.poshead},
                     {"teacher_checkpoint", c.teacher_checkpoint},
                     {"teacher_head_checkpoint", c.teacher_head_checkpoint},
                     {"preset", c.preset},
                     {"seeds", c.seeds},
                     {"checkpoint", c.checkpoint},
                     {"split", c.split}};
}

namespace {

void check_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
  for (const auto& [key, value] : given.items()) {
    const auto it = known.find(key);
    if (it == known.end()) throw std::invalid_argument("config: unknown key '" + prefix + key + "'");
    if (value.is_object() && it->is_object()) check_keys(value, *it, prefix + key + ".");
  }
}

}  // namespace

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  check_keys(j, nlohmann::json(RunConfig{}), "");
  const RunConfig d;
  c.dataset = j.value("dataset", d.dataset);
  const int n = c.dataset.num_classes;
  c.data_dir = j.value("data_dir", d.data_dir);
  c.teacher_model = j.contains("teacher_model") ? j.at("teacher_model").get<models::ModelSpec>()
                                                : models::ModelSpec::default_teacher(n);
  c.teacher_train = j.value("teacher_train", d.teacher_train);
  c.student_model = j.contains("student_model") ? j.at("student_model").get<models::ModelSpec>()
                                                : models::ModelSpec::default_student(n);
  c.student_train = j.value("student_train", d.student_train);
  c.poshead = j.value("poshead", d.poshead);
  c.teacher_checkpoint = j.value("teacher_checkpoint", d.teacher_checkpoint);
  c.teacher_head_checkpoint = j.value("teacher_head_checkpoint", d.teacher_head_checkpoint);
  c.preset = j.value("preset", d.preset);
  c.seeds = j.value("seeds", d.seeds);
  c.checkpoint = j.value("checkpoint", d.checkpoint);
  c.split = j.value("split", d.split);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  if (j.contains("command") && j.contains("config")) j = j.at("config");
  return j.get<RunConfig>();
}

void to_json(nlohmann::json& j, const Manifest& m) {
  j = nlohmann::json{{"command", m.command}, {"config_path", m.config_path}, {"config", m.config},
                     {"out_dir", m.out_dir}, {"version", m.version},         {"seed", m.seed},
                     {"deterministic", m.deterministic}};
}

void write_manifest(const std::filesystem::path& out_dir, const Manifest& m) {
  std::filesystem::create_directories(out_dir);
  const auto path = out_dir / "manifest.json";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << nlohmann::json(m).dump(2) << '\n';
}

}  // namespace idd
