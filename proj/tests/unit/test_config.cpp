#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "snaplab/error.hpp"
#include "snaplab/npy.hpp"
#include "snaplab/run.hpp"
#include "test_util.hpp"

namespace snaplab {
namespace {

using json = nlohmann::json;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string field_of(const std::string& text) {
  try {
    ExperimentConfig::from_text(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

TEST(Config, EmptyObjectGivesDefaults) {
  const ExperimentConfig c = ExperimentConfig::from_text("{}");
  const ExperimentConfig d;
  EXPECT_EQ(c.to_text(), d.to_text());
  EXPECT_EQ(c.hash(), d.hash());
}

TEST(Config, CanonicalTextRoundTrips) {
  ExperimentConfig c;
  c.name = "x";
  c.train.steps = 77;
  c.distill.w_min = 3.0;
  c.distill.w_max = 9.0;
  c.curve.w_list = {1.0, 4.0};
  c.genome = ArchitectureGenome::reference_efficient();
  const ExperimentConfig back = ExperimentConfig::from_text(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.train.steps, 77);
  EXPECT_EQ(back.genome, c.genome);
}

TEST(Config, HashTracksEveryField) {
  const ExperimentConfig a;
  ExperimentConfig b;
  b.probe.hidden += 1;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  EXPECT_EQ(a.hash(), hex64(fnv1a(a.to_text())));
}

TEST(Config, UnknownKeysNameTheirPath) {
  EXPECT_EQ(field_of(R"({"train": {"stepz": 3}})"), "train.stepz");
  EXPECT_EQ(field_of(R"({"bogus": 1})"), "bogus");
  EXPECT_EQ(field_of(R"({"decoder": {"spec": {"wdiths": [1, 2, 3]}}})"), "decoder.spec.wdiths");
}

TEST(Config, TypeAndRangeErrorsNameTheirPath) {
  EXPECT_EQ(field_of(R"({"train": {"steps": "ten"}})"), "train.steps");
  EXPECT_EQ(field_of(R"({"train": {"steps": 1.5}})"), "train.steps");
  EXPECT_EQ(field_of(R"({"seed": -1})"), "seed");
  EXPECT_EQ(field_of(R"({"distill": {"cfg_probability": 2.0}})"), "distill.cfg_probability");
  EXPECT_EQ(field_of(R"({"train": 5})"), "train");
  EXPECT_EQ(field_of(R"({"schedule": {"type": "linear-ish"}})"), "schedule.type");
  EXPECT_EQ(field_of("{not json"), "<root>");
  EXPECT_EQ(field_of(R"({"sample": {"n": 0}})"), "sample.n");
}

TEST(Config, LoadFromFile) {
  testing::TempDir dir("cfg");
  std::ofstream(dir / "c.json") << R"({"name": "filecfg", "train": {"steps": 9}})";
  const ExperimentConfig c = ExperimentConfig::load(dir / "c.json");
  EXPECT_EQ(c.name, "filecfg");
  EXPECT_EQ(c.train.steps, 9);
  EXPECT_THROW(ExperimentConfig::load(dir / "none.json"), ConfigError);
}

TEST(RunDirTest, ManifestRecordsRunContext) {
  testing::TempDir dir("run");
  ExperimentConfig cfg;
  cfg.train.seed = 42;
  {
    RunDir run("train", cfg, dir / "r");
    const json m = json::parse(slurp(dir / "r" / "manifest.json"));
    EXPECT_EQ(m["status"], "running");
    EXPECT_EQ(m["command"], "train");
    EXPECT_EQ(m["config_hash"], cfg.hash());
    EXPECT_EQ(m["seeds"]["train"], 42);
    EXPECT_EQ(m["code_version"], code_version());
    EXPECT_TRUE(std::filesystem::is_directory(run.checkpoints()));
    EXPECT_TRUE(std::filesystem::is_directory(run.plots()));

    std::ofstream(run.root() / "a.txt") << "x";
    run.add_artifact("a", run.root() / "a.txt");
    run.set_number("n", 2.5);
    run.set_string("s", "v");
    run.set("obj", R"({"k": [1, 2]})");
    run.finalize();
  }
  const json m = json::parse(slurp(dir / "r" / "manifest.json"));
  EXPECT_EQ(m["status"], "ok");
  EXPECT_EQ(m["artifacts"]["a"], "a.txt");
  EXPECT_EQ(m["n"], 2.5);
  EXPECT_EQ(m["s"], "v");
  EXPECT_EQ(m["obj"]["k"][1], 2);
  EXPECT_GE(m["wallclock_seconds"].get<double>(), 0.0);
  EXPECT_EQ(ExperimentConfig::from_text(m["config"].dump()).hash(), cfg.hash());
  EXPECT_FALSE(std::filesystem::exists(dir / "r" / "manifest.json.tmp"));
}

TEST(RunDirTest, MissingArtifactFailsFinalize) {
  testing::TempDir dir("run");
  RunDir run("train", ExperimentConfig{}, dir / "r");
  run.add_artifact("gone", "nope.csv");
  EXPECT_THROW(run.finalize(), Error);
  const json m = json::parse(slurp(dir / "r" / "manifest.json"));
  EXPECT_EQ(m["status"], "error: missing artifact gone");
}

TEST(RunDirTest, AbandonedRunIsMarkedFailed) {
  testing::TempDir dir("run");
  { RunDir run("train", ExperimentConfig{}, dir / "r"); }
  EXPECT_EQ(json::parse(slurp(dir / "r" / "manifest.json"))["status"], "failed");
}

TEST(RunDirTest, TimestampedUnderRunsRoot) {
  testing::TempDir dir("root");
  testing::EnvGuard env("SNAPLAB_RUNS_DIR", dir.path().string());
  EXPECT_EQ(runs_root(), dir.path());
  ExperimentConfig cfg;
  cfg.name = "named";
  RunDir a("train", cfg, {});
  RunDir b("train", cfg, {});
  EXPECT_EQ(a.root().parent_path(), dir.path());
  EXPECT_NE(a.root(), b.root());
  const std::string leaf = a.root().filename().string();
  EXPECT_EQ(leaf.substr(leaf.size() - 6), "-named");
  a.finalize();
  b.finalize();
}

TEST(Files, AtomicWriteReplaces) {
  testing::TempDir dir("atomic");
  write_file_atomic(dir / "f", "one");
  write_file_atomic(dir / "f", "two");
  EXPECT_EQ(slurp(dir / "f"), "two");
  EXPECT_FALSE(std::filesystem::exists(dir / "f.tmp"));
  EXPECT_THROW(write_file_atomic(dir / "no" / "such" / "f", "x"), Error);
}

TEST(Files, MetricsTimingAndSamples) {
  testing::TempDir dir("csv");
  const std::vector<MetricRecord> log{{1, 0.5, 0.25}, {10, 0.125, 1.5}};
  write_metrics_csv(dir / "m.csv", log, 7, "h");
  EXPECT_EQ(slurp(dir / "m.csv"), "step,loss,seed,config_hash\n1,0.5,7,h\n10,0.125,7,h\n");
  write_timing_csv(dir / "t.csv", log);
  EXPECT_EQ(slurp(dir / "t.csv"), "step,wallclock\n1,0.25\n10,1.5\n");

  Tensor x(2, 2);
  x << 1.0, -2.0, 0.5, 3.0;
  const std::vector<int> labels{4, 1};
  write_samples(dir.path(), x, labels);
  EXPECT_EQ(slurp(dir / "samples.csv"), "index,label,x0,x1\n0,4,1,-2\n1,1,0.5,3\n");
  EXPECT_EQ(read_npy(dir / "samples.npy"), x);
}

TEST(Files, DistillMetrics) {
  testing::TempDir dir("csv");
  DistillStage st;
  st.teacher_steps = 16;
  st.student_steps = 8;
  DistillRecord r;
  r.step = 3;
  r.loss_total = 1.5;
  r.loss_dstl = 1.0;
  r.loss_ori = 0.5;
  r.used_cfg = true;
  st.log.push_back(r);
  const std::vector<DistillStage> stages{st};
  write_distill_metrics_csv(dir / "d.csv", stages, 2, "h");
  EXPECT_EQ(slurp(dir / "d.csv"),
            "stage,teacher_steps,student_steps,step,loss_total,loss_dstl,loss_ori,used_cfg,seed,config_hash\n"
            "0,16,8,3,1.5,1,0.5,1,2,h\n");
}

}  // namespace
}  // namespace snaplab
