#include "idd/trainer.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "idd/artifacts.hpp"
#include "idd/checkpoint.hpp"

namespace idd::train {

namespace fs = std::filesystem;

// -------------------------------------------------------------- config ----

void TrainConfig::validate() const {
  if (total_iters <= 0) throw std::invalid_argument("TrainConfig: total_iters must be > 0");
  if (batch_size <= 0) throw std::invalid_argument("TrainConfig: batch_size must be > 0");
  if (!(base_lr > 0)) throw std::invalid_argument("TrainConfig: base_lr must be > 0");
  if (!(lr_power >= 0)) throw std::invalid_argument("TrainConfig: lr_power must be >= 0");
  if (momentum < 0 || momentum >= 1) throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
  if (weight_decay < 0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (!(grad_clip >= 0)) throw std::invalid_argument("TrainConfig: grad_clip must be >= 0");
  if (eval_every <= 0) throw std::invalid_argument("TrainConfig: eval_every must be > 0");
  if (student_head_hidden <= 0) throw std::invalid_argument("TrainConfig: student_head_hidden must be > 0");
  weights.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"total_iters", c.total_iters},   {"batch_size", c.batch_size},
                     {"base_lr", c.base_lr},           {"lr_power", c.lr_power},
                     {"momentum", c.momentum},         {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"seed", c.seed},                 {"weights", c.weights},
                     {"eval_every", c.eval_every},     {"student_head_hidden", c.student_head_hidden}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.total_iters = j.value("total_iters", d.total_iters);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.lr_power = j.value("lr_power", d.lr_power);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.seed = j.value("seed", d.seed);
  c.weights = j.contains("weights") ? j.at("weights").get<kd::LossWeights>() : d.weights;
  c.eval_every = j.value("eval_every", d.eval_every);
  c.student_head_hidden = j.value("student_head_hidden", d.student_head_hidden);
  c.validate();
}

double poly_lr(int iter, const TrainConfig& config) {
  if (iter < 0 || iter > config.total_iters) {
    throw std::invalid_argument("poly_lr: iteration " + std::to_string(iter) + " outside [0, " +
                                std::to_string(config.total_iters) + "]");
  }
  if (iter == config.total_iters) return 0.0;
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(config.total_iters);
  return config.base_lr * std::pow(frac, config.lr_power);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kDataStream = 2;
constexpr std::uint64_t kHeadStream = 3;

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream * 0xD1B54A32D192ED03ull));
}

DataOrder::DataOrder(std::uint64_t seed, std::size_t n) : seed_(seed), n_(n) {
  if (n == 0) throw std::invalid_argument("DataOrder: empty dataset");
}

std::size_t DataOrder::at(std::int64_t position) {
  const std::int64_t epoch = position / static_cast<std::int64_t>(n_);
  if (epoch != epoch_) {
    perm_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
    std::mt19937_64 rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n_ - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
      std::swap(perm_[i], perm_[j]);
    }
    epoch_ = epoch;
  }
  return perm_[static_cast<std::size_t>(position % static_cast<std::int64_t>(n_))];
}

// ------------------------------------------------------------- records ----

nlohmann::json to_json(const EvalRecord& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) {
    if (v) per.push_back(*v);
    else per.push_back(nullptr);
  }
  return {{"iteration", r.iteration}, {"miou", r.miou}, {"per_class_iou", per}, {"loss_mean", r.loss_mean}};
}

EvalRecord eval_record_from_json(const nlohmann::json& j) {
  EvalRecord r;
  r.iteration = j.at("iteration").get<int>();
  r.miou = j.at("miou").get<double>();
  for (const auto& v : j.at("per_class_iou")) {
    if (v.is_null()) r.per_class_iou.emplace_back();
    else r.per_class_iou.emplace_back(v.get<double>());
  }
  r.loss_mean = j.at("loss_mean").get<kd::LossBreakdown>();
  return r;
}

nlohmann::json summary_json(const RunRecord& r) {
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : r.evals) evals.push_back(to_json(e));
  return {{"kind", r.kind},
          {"config", r.config},
          {"evals", evals},
          {"final_miou", r.evals.empty() ? 0.0 : r.evals.back().miou},
          {"checkpoint", r.checkpoint},
          {"params", {{"trainable", r.params.trainable}, {"frozen", r.params.frozen}, {"total", r.params.total()}}},
          {"wall_seconds", r.wall_seconds}};
}

// ---------------------------------------------------------------- loop ----

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

// Keeps the lines of a JSONL file whose `key` is <= limit.
void truncate_jsonl(const fs::path& path, const char* key, int limit) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at(key).get<int>() <= limit) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

struct Accumulator {
  kd::LossBreakdown sum;
  int steps = 0;

  void add(const kd::LossBreakdown& b) {
    sum.l_tar += b.l_tar;
    sum.l_skd += b.l_skd;
    sum.l_cw += b.l_cw;
    sum.l_id += b.l_id;
    sum.l_pi += b.l_pi;
    sum.total += b.total;
    ++steps;
  }
  kd::LossBreakdown mean() const {
    kd::LossBreakdown m;
    if (steps == 0) return m;
    m.l_tar = sum.l_tar / steps;
    m.l_skd = sum.l_skd / steps;
    m.l_cw = sum.l_cw / steps;
    m.l_id = sum.l_id / steps;
    m.l_pi = sum.l_pi / steps;
    m.total = sum.total / steps;
    return m;
  }
};

const char* const kStateFile = "state.iddc";

TrainResult run(const TrainConfig& cfg, const models::ModelSpec& spec, const std::string& kind,
                std::span<const data::Sample> train, std::span<const data::Sample> val,
                models::Model<float>* teacher, position::PositionHead<float>* teacher_head,
                const RunOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  spec.validate();
  if (train.empty()) throw std::invalid_argument("training split is empty");
  if (val.empty()) throw std::invalid_argument("validation split is empty");
  const kd::LossWeights& w = cfg.weights;
  if (teacher) {
    if (!teacher->frozen()) throw std::invalid_argument("distill_student: teacher must be frozen");
    if (teacher->spec().num_classes != spec.num_classes) {
      throw std::invalid_argument("distill_student: teacher has " + std::to_string(teacher->spec().num_classes) +
                                  " classes, student " + std::to_string(spec.num_classes));
    }
    if (teacher_head && !teacher_head->frozen()) {
      throw std::invalid_argument("distill_student: teacher position head must be frozen");
    }
    if (w.enable_pi && w.pi_reference == kd::PiReference::kTeacherHead && !teacher_head) {
      throw std::invalid_argument("distill_student: L_pi is enabled but no teacher position head was given");
    }
    if (teacher_head && teacher_head->in_channels() != teacher->spec().feature_dim) {
      throw std::invalid_argument("distill_student: teacher position head expects " +
                                  std::to_string(teacher_head->in_channels()) + " channels, teacher exposes " +
                                  std::to_string(teacher->spec().feature_dim));
    }
  } else if (w.any_enabled()) {
    throw std::invalid_argument("supervised training takes no distillation terms");
  }

  models::Model<float> model(spec, derive_seed(cfg.seed, kModelStream));
  std::optional<position::PositionHead<float>> head;
  if (w.enable_pi) head.emplace(spec.feature_dim, cfg.student_head_hidden, derive_seed(cfg.seed, kHeadStream));
  std::vector<nn::Param<float>*> params = model.params();
  if (head) {
    const auto hp = head->params();
    params.insert(params.end(), hp.begin(), hp.end());
  }
  nn::Sgd<float> opt(params, cfg.momentum, cfg.weight_decay);
  DataOrder order(derive_seed(cfg.seed, kDataStream), train.size());

  RunRecord rec;
  rec.kind = kind;
  rec.config = {{"train", cfg}, {"model", spec}};
  const bool files = !opts.out_dir.empty();
  const fs::path steps_path = opts.out_dir / "steps.jsonl";
  const fs::path evals_path = opts.out_dir / "evals.jsonl";
  const fs::path state_path = opts.out_dir / kStateFile;

  int start = 0;
  if (files) {
    fs::create_directories(opts.out_dir);
    if (opts.resume && fs::exists(state_path)) {
      const Checkpoint st = load_checkpoint(state_path);
      if (st.header.value("kind", std::string()) != "train_state" || st.header.at("run") != rec.config ||
          st.header.at("run_kind").get<std::string>() != kind) {
        throw std::invalid_argument(state_path.string() + " belongs to a different run configuration");
      }
      start = st.header.at("iteration").get<int>();
      model.set_flat_params(st.block("model"));
      if (head) head->set_flat_params(st.block("head"));
      std::vector<std::vector<float>> vel(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) vel[i] = st.block("velocity." + std::to_string(i));
      opt.set_state(std::move(vel));
      for (const auto& e : st.header.at("evals")) rec.evals.push_back(eval_record_from_json(e));
      truncate_jsonl(steps_path, "iter", start - 1);
      truncate_jsonl(evals_path, "iteration", start);
    } else {
      write_text(steps_path, "");
      write_text(evals_path, "");
    }
  }
  std::ofstream steps_log, evals_log;
  if (files) {
    steps_log.open(steps_path, std::ios::app);
    evals_log.open(evals_path, std::ios::app);
  }

  kd::PositionHeads<float> heads{teacher_head, head ? &*head : nullptr};
  const bool use_teacher = teacher && w.any_enabled();
  const bool feature_grad = (w.enable_skd && w.pair_weight > 0) || w.enable_id || w.enable_pi;
  Accumulator acc;
  std::vector<std::size_t> idx(cfg.batch_size);

  for (int it = start; it < cfg.total_iters; ++it) {
    for (int s = 0; s < cfg.batch_size; ++s) {
      idx[s] = order.at(static_cast<std::int64_t>(it) * cfg.batch_size + s);
    }
    const data::Batch batch = data::make_batch(train, idx);
    const double lr = poly_lr(it, cfg);
    opt.zero_grad();
    const auto out = model.forward(batch.images, true);
    models::ForwardOutput<float> tout;
    if (use_teacher) tout = teacher->forward(batch.images, false);
    kd::StudentGrads<float> grads;
    const kd::LossBreakdown b = kd::total_loss(tout, out, batch.labels, heads, w, &grads);
    if (!std::isfinite(b.total)) {
      if (files) {
        nlohmann::json dump = {{"iteration", it}, {"lr", lr}, {"loss", b}, {"batch_indices", idx}};
        write_text(opts.out_dir / "nan_dump.json", dump.dump(2) + "\n");
        save_model(opts.out_dir / "nan_snapshot.iddc", model, {{"iteration", it}});
      }
      throw TrainingError("non-finite loss at iteration " + std::to_string(it) + ": " + nlohmann::json(b).dump());
    }
    model.backward(feature_grad ? &grads.features : nullptr, grads.logits);
    nn::clip_grad_norm<float>(params, cfg.grad_clip);
    opt.step(lr);
    acc.add(b);
    if (files) steps_log << nlohmann::json{{"iter", it}, {"lr", lr}, {"loss", b}}.dump() << '\n';
    if (opts.on_step) opts.on_step(it, b);

    const int done = it + 1;
    if (done % cfg.eval_every == 0 || done == cfg.total_iters) {
      const metrics::MetricsReport rep = metrics::evaluate_model(model, val, false);
      EvalRecord e{done, rep.miou, rep.per_class_iou, acc.mean()};
      acc = Accumulator{};
      rec.evals.push_back(e);
      if (opts.on_eval) opts.on_eval(e);
      if (files) {
        evals_log << to_json(e).dump() << '\n';
        steps_log.flush();
        evals_log.flush();
        Checkpoint st;
        nlohmann::json evals = nlohmann::json::array();
        for (const auto& r : rec.evals) evals.push_back(to_json(r));
        st.header = {{"kind", "train_state"}, {"run_kind", kind}, {"run", rec.config},
                     {"iteration", done},     {"evals", evals}};
        st.blocks["model"] = model.flat_params();
        if (head) st.blocks["head"] = head->flat_params();
        for (std::size_t i = 0; i < params.size(); ++i) {
          st.blocks["velocity." + std::to_string(i)] = opt.state()[i];
        }
        save_checkpoint(state_path, st);
      }
    }
  }

  model.zero_grad();
  if (head) head->zero_grad();
  if (kind == "teacher") model.freeze();
  rec.params = model.param_count();
  if (files) {
    const fs::path ckpt = opts.out_dir / "model.iddc";
    save_model(ckpt, model, {{"run_kind", kind}, {"iteration", cfg.total_iters}});
    rec.checkpoint = ckpt.string();
    if (head) save_position_head(opts.out_dir / "student_head.iddc", *head, {{"source", "student"}});
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (files) write_text(opts.out_dir / "summary.json", summary_json(rec).dump(2) + "\n");
  return TrainResult{std::move(model), std::move(rec), std::move(head)};
}

}  // namespace

TrainResult train_supervised(const TrainConfig& config, const models::ModelSpec& spec,
                             std::span<const data::Sample> train, std::span<const data::Sample> val,
                             const RunOptions& options) {
  return run(config, spec, "supervised", train, val, nullptr, nullptr, options);
}

TrainResult train_teacher(const TrainConfig& config, const models::ModelSpec& spec,
                          std::span<const data::Sample> train, std::span<const data::Sample> val,
                          const RunOptions& options) {
  return run(config, spec, "teacher", train, val, nullptr, nullptr, options);
}

TrainResult distill_student(const TrainConfig& config, const models::ModelSpec& student_spec,
                            std::span<const data::Sample> train, std::span<const data::Sample> val,
                            models::Model<float>& teacher, position::PositionHead<float>* teacher_head,
                            const RunOptions& options) {
  return run(config, student_spec, "distill", train, val, &teacher, teacher_head, options);
}

// ------------------------------------------------------------ ablation ----

nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json dist = nlohmann::json::array();
    for (const auto& d : r.seed_distance) {
      if (d) dist.push_back(*d);
      else dist.push_back(nullptr);
    }
    rows.push_back({{"name", r.name},
                    {"skd", r.skd},
                    {"cw", r.cw},
                    {"id", r.id},
                    {"pi", r.pi},
                    {"miou", r.miou},
                    {"params", r.params},
                    {"seed_miou", r.seed_miou},
                    {"seed_mean_interclass_distance", dist}});
  }
  return {{"columns", {"skd", "cw", "id", "pi", "miou", "params"}}, {"seeds", t.seeds}, {"rows", rows}};
}

AblationTable ablation_from_json(const nlohmann::json& j) {
  AblationTable t;
  t.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& r : j.at("rows")) {
    AblationRow row;
    row.name = r.at("name").get<std::string>();
    row.skd = r.at("skd").get<bool>();
    row.cw = r.at("cw").get<bool>();
    row.id = r.at("id").get<bool>();
    row.pi = r.at("pi").get<bool>();
    row.miou = r.at("miou").get<double>();
    row.params = r.at("params").get<std::int64_t>();
    row.seed_miou = r.at("seed_miou").get<std::vector<double>>();
    for (const auto& d : r.at("seed_mean_interclass_distance")) {
      if (d.is_null()) row.seed_distance.emplace_back();
      else row.seed_distance.emplace_back(d.get<double>());
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string render_ablation_text(const AblationTable& t) {
  auto cell = [](const std::string& s, std::size_t width) {
    return s + std::string(width > s.size() ? width - s.size() : 0, ' ');
  };
  std::vector<std::vector<std::string>> lines;
  lines.push_back({"row", "skd", "cw", "id", "pi", "miou", "params"});
  for (const auto& r : t.rows) {
    auto flag = [](bool b) { return std::string(b ? "x" : "-"); };
    lines.push_back({r.name, flag(r.skd), flag(r.cw), flag(r.id), flag(r.pi), nlohmann::json(r.miou).dump(),
                     std::to_string(r.params)});
  }
  std::vector<std::size_t> width(lines[0].size(), 0);
  for (const auto& l : lines)
    for (std::size_t c = 0; c < l.size(); ++c) width[c] = std::max(width[c], l[c].size());
  std::ostringstream o;
  for (const auto& l : lines) {
    std::string row;
    for (std::size_t c = 0; c < l.size(); ++c) row += cell(l[c], width[c] + 2);
    while (!row.empty() && row.back() == ' ') row.pop_back();
    o << row << '\n';
  }
  return o.str();
}

namespace {

struct JobResult {
  double miou = 0.0;
  std::optional<double> distance;
  std::int64_t params = 0;
};

nlohmann::json job_json(const JobResult& r) {
  return {{"miou", r.miou},
          {"mean_interclass_distance", r.distance ? nlohmann::json(*r.distance) : nlohmann::json(nullptr)},
          {"params", r.params}};
}

JobResult job_from_json(const nlohmann::json& j) {
  JobResult r;
  r.miou = j.at("miou").get<double>();
  if (!j.at("mean_interclass_distance").is_null()) r.distance = j.at("mean_interclass_distance").get<double>();
  r.params = j.at("params").get<std::int64_t>();
  return r;
}

}  // namespace

AblationTable run_ablation(const TrainConfig& base, const models::ModelSpec& student_spec,
                           std::span<const data::Sample> train, std::span<const data::Sample> val,
                           models::Model<float>& teacher, position::PositionHead<float>* teacher_head,
                           std::span<const std::uint64_t> seeds, const AblationOptions& options) {
  if (seeds.empty()) throw std::invalid_argument("run_ablation: at least one seed is required");
  const auto& names = kd::LossWeights::preset_names();
  struct Job {
    std::size_t row;
    std::size_t seed;
    TrainConfig cfg;
    fs::path dir;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < names.size(); ++r) {
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      Job j{r, s, base, {}};
      j.cfg.seed = seeds[s];
      j.cfg.weights = kd::LossWeights::preset(names[r], base.weights);
      if (!options.out_dir.empty()) j.dir = options.out_dir / names[r] / ("seed-" + std::to_string(seeds[s]));
      jobs.push_back(std::move(j));
    }
  }

  auto execute = [&](const Job& j) {
    RunOptions ro;
    ro.out_dir = j.dir;
    auto res = distill_student(j.cfg, student_spec, train, val, teacher, teacher_head, ro);
    JobResult out;
    out.miou = res.record.evals.back().miou;
    out.params = static_cast<std::int64_t>(res.record.params.total());
    out.distance = metrics::mean_interclass_distance(res.model, val);
    if (!j.dir.empty()) write_text(j.dir / "result.json", job_json(out).dump(2) + "\n");
    return out;
  };

  std::vector<JobResult> results(jobs.size());
  const int workers = options.out_dir.empty() ? 1 : std::max(1, options.workers);
  if (workers == 1) {
    for (std::size_t k = 0; k < jobs.size(); ++k) {
      if (options.on_run) options.on_run(names[jobs[k].row], seeds[jobs[k].seed]);
      results[k] = execute(jobs[k]);
    }
  } else {
    std::map<pid_t, std::size_t> running;
    std::size_t next = 0;
    std::string failure;
    auto reap = [&]() {
      int status = 0;
      const pid_t pid = ::waitpid(-1, &status, 0);
      if (pid < 0) throw std::runtime_error("run_ablation: waitpid failed");
      const std::size_t k = running.at(pid);
      running.erase(pid);
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        failure = names[jobs[k].row] + " seed " + std::to_string(seeds[jobs[k].seed]) + " failed";
        return;
      }
      std::ifstream in(jobs[k].dir / "result.json");
      results[k] = job_from_json(nlohmann::json::parse(in));
    };
    while (next < jobs.size() || !running.empty()) {
      if (next < jobs.size() && static_cast<int>(running.size()) < workers && failure.empty()) {
        if (options.on_run) options.on_run(names[jobs[next].row], seeds[jobs[next].seed]);
        std::fflush(nullptr);
        const pid_t pid = ::fork();
        if (pid < 0) throw std::runtime_error("run_ablation: fork failed");
        if (pid == 0) {
          int code = 0;
          try {
            execute(jobs[next]);
          } catch (const std::exception& e) {
            std::fprintf(stderr, "ablation worker: %s\n", e.what());
            code = 1;
          }
          std::fflush(nullptr);
          ::_exit(code);
        }
        running[pid] = next++;
      } else if (!running.empty()) {
        reap();
      } else {
        break;
      }
    }
    if (!failure.empty()) throw std::runtime_error("run_ablation: " + failure);
  }

  AblationTable t;
  t.seeds.assign(seeds.begin(), seeds.end());
  for (std::size_t r = 0; r < names.size(); ++r) {
    const kd::LossWeights w = kd::LossWeights::preset(names[r], base.weights);
    AblationRow row;
    row.name = names[r];
    row.skd = w.enable_skd;
    row.cw = w.enable_cw;
    row.id = w.enable_id;
    row.pi = w.enable_pi;
    double sum = 0.0;
    for (std::size_t k = 0; k < jobs.size(); ++k) {
      if (jobs[k].row != r) continue;
      row.seed_miou.push_back(results[k].miou);
      row.seed_distance.push_back(results[k].distance);
      row.params = results[k].params;
      sum += results[k].miou;
    }
    row.miou = sum / static_cast<double>(seeds.size());
    t.rows.push_back(std::move(row));
  }
  const metrics::MetricsReport tr = metrics::evaluate_model(teacher, val, true);
  AblationRow trow;
  trow.name = "teacher";
  trow.miou = tr.miou;
  trow.params = tr.params;
  trow.seed_miou.assign(seeds.size(), tr.miou);
  trow.seed_distance.assign(seeds.size(), tr.mean_interclass_distance);
  t.rows.push_back(std::move(trow));
  return t;
}

}  // namespace idd::train
