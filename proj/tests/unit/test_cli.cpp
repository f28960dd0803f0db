#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#ifndef IDD_CLI_PATH
#error "IDD_CLI_PATH must point at the idd executable"
#endif

namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path p = [] {
    const fs::path d = fs::temp_directory_path() / "idd_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

int idd(const std::string& args) {
  const std::string cmd = std::string(IDD_CLI_PATH) + " " + args + " >>" + (root() / "cli.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json tiny_config() {
  const fs::path r = root();
  const nlohmann::json train = {{"total_iters", 4}, {"batch_size", 2}, {"eval_every", 2}};
  auto student = train;
  student["weights"] = {{"affinity_grid", 4}};
  return {{"dataset", {{"height", 16}, {"width", 16}, {"train_count", 16}, {"val_count", 4}}},
          {"data_dir", (r / "data").string()},
          {"teacher_train", train},
          {"student_train", student},
          {"poshead", {{"iters", 3}, {"batch_size", 2}, {"eval_samples", 4}}},
          {"teacher_checkpoint", (r / "teacher" / "model.iddc").string()},
          {"teacher_head_checkpoint", (r / "poshead" / "teacher_head.iddc").string()},
          {"seeds", {1}}};
}

std::string config_file(const std::string& name, const nlohmann::json& j) {
  const fs::path p = root() / name;
  std::ofstream(p) << j.dump(2);
  return p.string();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = config_file("tiny.json", tiny_config());
    ASSERT_EQ(idd("gen-data --config " + cfg_), 0);
    ASSERT_EQ(idd("train-teacher --config " + cfg_ + " --out " + (root() / "teacher").string()), 0);
    ASSERT_EQ(idd("pretrain-poshead --config " + cfg_ + " --out " + (root() / "poshead").string()), 0);
  }
  static std::string cfg_;
};

std::string Cli::cfg_;

}  // namespace

TEST_F(Cli, GenDataWritesDatasetsAndManifest) {
  const fs::path d = root() / "data";
  EXPECT_TRUE(fs::exists(d / "train.idds"));
  EXPECT_TRUE(fs::exists(d / "val.idds"));
  const auto m = nlohmann::json::parse(slurp(d / "manifest.json"));
  EXPECT_EQ(m.at("command"), "gen-data");
  EXPECT_EQ(m.at("config").at("dataset").at("train_count"), 16);
}

TEST_F(Cli, RefusesNonEmptyOutputWithoutForce) {
  EXPECT_EQ(idd("gen-data --config " + cfg_), 2);
  const fs::path other = root() / "data_copy";
  EXPECT_EQ(idd("gen-data --config " + cfg_ + " --out " + other.string()), 0);
  EXPECT_EQ(idd("gen-data --config " + cfg_ + " --out " + other.string() + " --force"), 0);
  EXPECT_EQ(slurp(other / "train.idds"), slurp(root() / "data" / "train.idds"));
}

TEST_F(Cli, UsageErrorsExitWithTwo) {
  auto bad = tiny_config();
  bad["dataset"]["num_classes"] = 1;
  EXPECT_EQ(idd("gen-data --force --out " + (root() / "bad").string() + " --config " + config_file("bad.json", bad)),
            2);
  EXPECT_EQ(idd("distill --config " + cfg_ + " --preset nope --out " + (root() / "nope").string()), 2);
  EXPECT_EQ(idd("evaluate --config " + cfg_ + " --out " + (root() / "noeval").string()), 2);
  EXPECT_EQ(idd("nosuchcommand"), 2);
  EXPECT_EQ(idd("distill --bogus-flag"), 2);
  EXPECT_EQ(idd("--help"), 0);
  auto typo = tiny_config();
  typo["student_train"]["totl_iters"] = 3;
  EXPECT_EQ(idd("distill --config " + config_file("typo.json", typo) + " --out " + (root() / "typo").string()), 2);
}

TEST_F(Cli, MissingArtifactsAreRuntimeErrors) {
  auto c = tiny_config();
  c["teacher_checkpoint"] = (root() / "absent.iddc").string();
  EXPECT_EQ(idd("distill --config " + config_file("absent.json", c) + " --out " + (root() / "absent").string()), 1);
  auto other = tiny_config();
  other["dataset"]["seed"] = 99;
  EXPECT_EQ(idd("distill --config " + config_file("otherdata.json", other) + " --out " +
                (root() / "otherdata").string()),
            1);
}

TEST_F(Cli, DistillEvaluateAndManifestRerun) {
  const fs::path a = root() / "distill_a", b = root() / "distill_b";
  ASSERT_EQ(idd("distill --config " + cfg_ + " --preset full-idd --seed 5 --out " + a.string()), 0);
  for (const char* f : {"manifest.json", "steps.jsonl", "evals.jsonl", "summary.json", "model.iddc",
                        "student_head.iddc"}) {
    EXPECT_TRUE(fs::exists(a / f)) << f;
  }
  const auto m = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(m.at("seed"), 5);
  EXPECT_EQ(m.at("config").at("preset"), "full-idd");

  ASSERT_EQ(idd("distill --config " + (a / "manifest.json").string() + " --out " + b.string()), 0);
  EXPECT_EQ(slurp(a / "steps.jsonl"), slurp(b / "steps.jsonl"));
  EXPECT_EQ(slurp(a / "evals.jsonl"), slurp(b / "evals.jsonl"));
  EXPECT_EQ(slurp(a / "model.iddc"), slurp(b / "model.iddc"));

  const fs::path e = root() / "eval";
  ASSERT_EQ(idd("evaluate --config " + cfg_ + " --checkpoint " + (a / "model.iddc").string() + " --out " +
                e.string()),
            0);
  const auto rep = nlohmann::json::parse(slurp(e / "report.json"));
  EXPECT_EQ(rep.size(), 4u);
  EXPECT_EQ(rep.at("per_class_iou").size(), 6u);
  EXPECT_TRUE(fs::exists(e / "report_iou.svg"));

  const fs::path both = root() / "eval_both";
  ASSERT_EQ(idd("evaluate --config " + cfg_ + " --split both --checkpoint " + (a / "model.iddc").string() +
                " --out " + both.string()),
            0);
  EXPECT_TRUE(fs::exists(both / "report_train.json"));
  EXPECT_TRUE(fs::exists(both / "report_val.json"));
}

TEST_F(Cli, ResumeFinishesAnInterruptedDistill) {
  const fs::path a = root() / "resume_a";
  ASSERT_EQ(idd("distill --config " + cfg_ + " --preset skd-cw --out " + a.string()), 0);
  const std::string steps = slurp(a / "steps.jsonl");
  EXPECT_EQ(idd("distill --config " + cfg_ + " --preset skd-cw --out " + a.string() + " --resume"), 0);
  EXPECT_EQ(slurp(a / "steps.jsonl"), steps);
}

TEST_F(Cli, AblateEmitsTableStructure) {
  const fs::path a = root() / "ablate";
  ASSERT_EQ(idd("ablate --config " + cfg_ + " --out " + a.string()), 0);
  const auto t = nlohmann::json::parse(slurp(a / "ablation.json"));
  EXPECT_EQ(t.at("columns"), nlohmann::json({"skd", "cw", "id", "pi", "miou", "params"}));
  ASSERT_EQ(t.at("rows").size(), 7u);
  EXPECT_EQ(t.at("rows")[6].at("name"), "teacher");
  EXPECT_TRUE(fs::exists(a / "ablation.txt"));
  EXPECT_TRUE(fs::exists(a / "miou_curves.svg"));
  EXPECT_TRUE(fs::exists(a / "per_seed" / "seed-1.json"));
  EXPECT_TRUE(fs::exists(a / "full-idd" / "seed-1" / "result.json"));
}
