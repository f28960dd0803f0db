#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "idd/artifacts.hpp"
#include "idd/config.hpp"
#include "idd/data_synth.hpp"
#include "idd/metrics.hpp"
#include "idd/position.hpp"
#include "idd/trainer.hpp"

namespace fs = std::filesystem;
using namespace idd;

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool force = false;
};

// Exit status 2: the request itself is invalid (config, flags, existing output).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file or a manifest.json from an earlier run");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "override the seed used by this command");
  cmd->add_flag("--deterministic", f.deterministic, "deterministic mode (recorded; execution is always serial)");
  cmd->add_flag("--force", f.force, "overwrite an existing output directory");
}

RunConfig resolve_config(const CommonFlags& f) {
  try {
    RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
    c.validate();
    return c;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

void prepare_out(const fs::path& out, bool force, bool resume) {
  if (fs::exists(out) && !fs::is_directory(out)) throw UsageError(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out) && !force && !resume) {
    throw UsageError("output directory " + out.string() + " is not empty (use --force to overwrite)");
  }
  if (force && !resume && fs::exists(out)) {
    for (const auto& entry : fs::directory_iterator(out)) fs::remove_all(entry.path());
  }
  fs::create_directories(out);
}

void manifest(const std::string& command, const CommonFlags& f, const RunConfig& c, const fs::path& out,
              std::uint64_t seed) {
  Manifest m;
  m.command = command;
  m.config_path = f.config;
  m.config = c;
  m.out_dir = out.string();
  m.version = version();
  m.seed = seed;
  m.deterministic = true;
  write_manifest(out, m);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  if (!o) throw std::runtime_error("cannot write " + path.string());
  o << text;
  if (!o) throw std::runtime_error("write failed: " + path.string());
}

std::vector<data::Sample> load_split(const RunConfig& c, data::Split split) {
  const fs::path path = fs::path(c.data_dir) / (data::to_string(split) + ".idds");
  if (!fs::exists(path)) throw std::runtime_error("dataset file not found: " + path.string() + " (run gen-data)");
  data::DatasetFile f = data::load_dataset(path, c.dataset.num_classes);
  if (!(f.spec == c.dataset)) {
    throw std::runtime_error(path.string() + " was generated with a different dataset config");
  }
  return std::move(f.samples);
}

models::Model<float> load_frozen_model(const std::string& path, int classes) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  auto m = load_model(path, classes);
  m.freeze();
  return m;
}

void print_eval(const train::EvalRecord& e) {
  std::printf("iter %6d  miou %.4f  loss %.4f\n", e.iteration, e.miou, e.loss_mean.total);
  std::fflush(stdout);
}

// ------------------------------------------------------------ commands ----

int cmd_gen_data(const CommonFlags& f) {
  RunConfig c = resolve_config(f);
  if (f.seed) c.dataset.seed = *f.seed;
  const fs::path out = f.out.empty() ? fs::path(c.data_dir) : fs::path(f.out);
  c.data_dir = out.string();
  prepare_out(out, f.force, false);
  manifest("gen-data", f, c, out, c.dataset.seed);
  for (data::Split split : {data::Split::kTrain, data::Split::kVal}) {
    const auto samples = data::generate_dataset(c.dataset, split);
    const fs::path path = out / (data::to_string(split) + ".idds");
    data::save_dataset(path, c.dataset, split, samples);
    data::load_dataset(path, c.dataset.num_classes);
    std::printf("wrote %s (%zu samples)\n", path.c_str(), samples.size());
  }
  return 0;
}

int cmd_train_teacher(const CommonFlags& f, bool resume) {
  RunConfig c = resolve_config(f);
  if (f.seed) c.teacher_train.seed = *f.seed;
  const fs::path out = f.out.empty() ? fs::path("runs/teacher") : fs::path(f.out);
  prepare_out(out, f.force, resume);
  manifest("train-teacher", f, c, out, c.teacher_train.seed);
  const auto train = load_split(c, data::Split::kTrain);
  const auto val = load_split(c, data::Split::kVal);
  train::RunOptions ro;
  ro.out_dir = out;
  ro.resume = resume;
  ro.on_eval = print_eval;
  auto r = train::train_teacher(c.teacher_train, c.teacher_model, train, val, ro);
  std::printf("teacher checkpoint: %s\n", r.record.checkpoint.c_str());
  return 0;
}

int cmd_pretrain_poshead(const CommonFlags& f) {
  RunConfig c = resolve_config(f);
  if (f.seed) c.poshead.seed = *f.seed;
  const fs::path out = f.out.empty() ? fs::path("runs/poshead") : fs::path(f.out);
  prepare_out(out, f.force, false);
  manifest("pretrain-poshead", f, c, out, c.poshead.seed);
  auto teacher = load_frozen_model(c.teacher_checkpoint, c.dataset.num_classes);
  const auto train = load_split(c, data::Split::kTrain);
  const auto val = load_split(c, data::Split::kVal);
  std::ofstream steps(out / "steps.jsonl", std::ios::trunc);
  auto res = position::pretrain_position_head(teacher, train, val, c.poshead, [&](int it, double loss) {
    steps << nlohmann::json{{"iter", it}, {"mse", loss}}.dump() << '\n';
  });
  steps.close();
  save_position_head(out / "teacher_head.iddc", res.head, {{"source", c.teacher_checkpoint}});
  const nlohmann::json report = {{"initial_val_mse", res.initial_val_mse},
                                 {"final_val_mse", res.final_val_mse},
                                 {"val_correlation", res.val_correlation}};
  write_file(out / "poshead_report.json", report.dump(2) + "\n");
  std::printf("val mse %.5f -> %.5f, correlation %.4f\n", res.initial_val_mse, res.final_val_mse,
              res.val_correlation);
  return 0;
}

std::optional<position::PositionHead<float>> load_teacher_head(const RunConfig& c, const kd::LossWeights& w) {
  const bool needed = w.enable_pi && w.pi_reference == kd::PiReference::kTeacherHead;
  if (!needed) return std::nullopt;
  if (!fs::exists(c.teacher_head_checkpoint)) {
    throw std::runtime_error("teacher position head not found: " + c.teacher_head_checkpoint +
                             " (run pretrain-poshead)");
  }
  auto h = load_position_head(c.teacher_head_checkpoint);
  h.freeze();
  return h;
}

int cmd_distill(const CommonFlags& f, const std::string& preset, bool resume) {
  RunConfig c = resolve_config(f);
  if (f.seed) c.student_train.seed = *f.seed;
  if (!preset.empty()) c.preset = preset;
  try {
    c.student_train.weights = kd::LossWeights::preset(c.preset, c.student_train.weights);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const fs::path out = f.out.empty() ? fs::path("runs/distill-" + c.preset) : fs::path(f.out);
  prepare_out(out, f.force, resume);
  manifest("distill", f, c, out, c.student_train.seed);
  auto teacher = load_frozen_model(c.teacher_checkpoint, c.dataset.num_classes);
  auto head = load_teacher_head(c, c.student_train.weights);
  const auto train = load_split(c, data::Split::kTrain);
  const auto val = load_split(c, data::Split::kVal);
  train::RunOptions ro;
  ro.out_dir = out;
  ro.resume = resume;
  ro.on_eval = print_eval;
  auto r = train::distill_student(c.student_train, c.student_model, train, val, teacher, head ? &*head : nullptr,
                                  ro);
  std::printf("student checkpoint: %s\n", r.record.checkpoint.c_str());
  return 0;
}

int cmd_evaluate(const CommonFlags& f, const std::string& checkpoint, const std::string& split) {
  RunConfig c = resolve_config(f);
  if (!checkpoint.empty()) c.checkpoint = checkpoint;
  if (!split.empty()) c.split = split;
  if (c.checkpoint.empty()) throw UsageError("evaluate needs a checkpoint (--checkpoint or config.checkpoint)");
  if (c.split != "train" && c.split != "val" && c.split != "both") {
    throw UsageError("split must be train, val or both (got '" + c.split + "')");
  }
  const fs::path out = f.out.empty() ? fs::path("runs/eval") : fs::path(f.out);
  prepare_out(out, f.force, false);
  manifest("evaluate", f, c, out, 0);
  auto model = load_frozen_model(c.checkpoint, c.dataset.num_classes);
  std::vector<std::string> splits;
  if (c.split == "both") splits = {"train", "val"};
  else splits = {c.split};
  double last = 0.0;
  for (const auto& s : splits) {
    const auto samples = load_split(c, data::split_from_string(s));
    const auto rep = metrics::evaluate_model(model, samples);
    const std::string stem = splits.size() == 1 ? "report" : "report_" + s;
    write_file(out / (stem + ".json"), metrics::to_json(rep).dump(2) + "\n");
    write_file(out / (stem + "_iou.svg"), metrics::render_iou_svg(rep, fs::path(c.checkpoint).string() + " / " + s));
    last = rep.miou;
  }
  std::printf("miou %.6f\n", last);
  return 0;
}

std::vector<metrics::Series> ablation_curves(const fs::path& out, const train::AblationTable& t) {
  std::vector<metrics::Series> series;
  for (const auto& row : t.rows) {
    if (row.name == "teacher") continue;
    std::map<int, std::pair<double, int>> acc;
    for (auto seed : t.seeds) {
      std::ifstream in(out / row.name / ("seed-" + std::to_string(seed)) / "evals.jsonl");
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto e = train::eval_record_from_json(nlohmann::json::parse(line));
        acc[e.iteration].first += e.miou;
        acc[e.iteration].second += 1;
      }
    }
    metrics::Series s{row.name, {}};
    for (const auto& [it, v] : acc) s.points.emplace_back(it, v.first / v.second);
    series.push_back(std::move(s));
  }
  return series;
}

int cmd_ablate(const CommonFlags& f, std::optional<int> seeds) {
  RunConfig c = resolve_config(f);
  if (seeds) {
    if (*seeds < 1) throw UsageError("--seeds must be >= 1");
    const std::uint64_t first = f.seed.value_or(1);
    c.seeds.clear();
    for (int k = 0; k < *seeds; ++k) c.seeds.push_back(first + k);
  } else if (f.seed) {
    c.seeds = {*f.seed};
  }
  const fs::path out = f.out.empty() ? fs::path("runs/ablation") : fs::path(f.out);
  prepare_out(out, f.force, false);
  manifest("ablate", f, c, out, c.seeds.front());
  auto teacher = load_frozen_model(c.teacher_checkpoint, c.dataset.num_classes);
  kd::LossWeights full = c.student_train.weights;
  full.enable_pi = true;
  auto head = load_teacher_head(c, full);
  const auto train = load_split(c, data::Split::kTrain);
  const auto val = load_split(c, data::Split::kVal);

  train::AblationOptions ao;
  ao.out_dir = out;
  if (const char* env = std::getenv("IDD_NUM_WORKERS")) ao.workers = std::max(1, std::atoi(env));
  ao.on_run = [](const std::string& name, std::uint64_t seed) {
    std::printf("running %s seed %llu\n", name.c_str(), static_cast<unsigned long long>(seed));
    std::fflush(stdout);
  };
  const auto table = train::run_ablation(c.student_train, c.student_model, train, val, teacher,
                                         head ? &*head : nullptr, c.seeds, ao);
  write_file(out / "ablation.json", train::to_json(table).dump(2) + "\n");
  const std::string text = train::render_ablation_text(table);
  write_file(out / "ablation.txt", text);
  for (std::size_t s = 0; s < table.seeds.size(); ++s) {
    train::AblationTable one;
    one.seeds = {table.seeds[s]};
    for (const auto& row : table.rows) {
      train::AblationRow r = row;
      r.miou = row.seed_miou[s];
      r.seed_miou = {row.seed_miou[s]};
      r.seed_distance = {row.seed_distance[s]};
      one.rows.push_back(std::move(r));
    }
    const std::string stem = "seed-" + std::to_string(table.seeds[s]);
    fs::create_directories(out / "per_seed");
    write_file(out / "per_seed" / (stem + ".json"), train::to_json(one).dump(2) + "\n");
    write_file(out / "per_seed" / (stem + ".txt"), train::render_ablation_text(one));
  }
  write_file(out / "miou_curves.svg",
             metrics::render_curves_svg(ablation_curves(out, table), "val mIoU (mean over seeds)", "iteration",
                                        "mIoU"));
  std::fputs(text.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"idd: inter-class distance distillation for semantic segmentation"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);

  CommonFlags gen_f, teacher_f, pos_f, distill_f, eval_f, ablate_f;
  bool teacher_resume = false, distill_resume = false;
  std::string preset, checkpoint, split;
  std::optional<int> seeds;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic train/val datasets");
  add_common(gen, gen_f);
  auto* teacher = app.add_subcommand("train-teacher", "train the teacher on the target loss");
  add_common(teacher, teacher_f);
  teacher->add_flag("--resume", teacher_resume, "continue from the last eval checkpoint in --out");
  auto* pos = app.add_subcommand("pretrain-poshead", "fit the teacher position head on frozen teacher features");
  add_common(pos, pos_f);
  auto* distill = app.add_subcommand("distill", "train a student with the distillation objective");
  add_common(distill, distill_f);
  distill->add_option("--preset", preset, "baseline, skd, skd-cw, skd-cw-id, skd-cw-pi or full-idd");
  distill->add_flag("--resume", distill_resume, "continue from the last eval checkpoint in --out");
  auto* eval = app.add_subcommand("evaluate", "score a model checkpoint");
  add_common(eval, eval_f);
  eval->add_option("--checkpoint", checkpoint, "model checkpoint to evaluate");
  eval->add_option("--split", split, "train, val or both");
  auto* ablate = app.add_subcommand("ablate", "run every preset and tabulate mIoU");
  add_common(ablate, ablate_f);
  ablate->add_option("--seeds", seeds, "number of seeds per row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_f);
    if (*teacher) return cmd_train_teacher(teacher_f, teacher_resume);
    if (*pos) return cmd_pretrain_poshead(pos_f);
    if (*distill) return cmd_distill(distill_f, preset, distill_resume);
    if (*eval) return cmd_evaluate(eval_f, checkpoint, split);
    if (*ablate) return cmd_ablate(ablate_f, seeds);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "idd: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "idd: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
