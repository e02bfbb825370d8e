#include "snaplab/pipeline.hpp"

#include <fstream>
#include <functional>
#include <ostream>

#include "json.hpp"
#include "snaplab/error.hpp"

namespace snaplab {

namespace fs = std::filesystem;
using json = nlohmann::json;

LatencyTable make_latency_table(const ExperimentConfig& config, const ArchitectureGenome& genome) {
  const auto space = genome_space(genome);
  if (config.evolve.latency_source == LatencySource::Proxy)
    return proxy_latency_table(space, config.model, config.evolve.proxy_ms_per_kparam);
  return build_latency_table(space, isolated_block_bench(config.model, config.evolve.lut_batch),
                             config.evolve.lut_reps, machine_id());
}

double resolve_target(const EvolveSettings& settings, double start_latency) {
  return settings.target_ms > 0.0 ? settings.target_ms : settings.target_fraction * start_latency;
}

EvolveResult run_evolution(const Model& start, const ConditionalDataset& data, const ConsistencyProbe& probe,
                           const ExperimentConfig& config, const LatencyTable& table) {
  const NoiseSchedule schedule = NoiseSchedule::from_name(config.schedule);
  const EvolveSettings& e = config.evolve;
  ConsistencyQualityOptions q;
  q.eval_steps = e.eval_steps;
  q.cfg_scale = e.cfg_scale;
  q.valset_size = e.valset_size;
  q.seed = derive_seed(config.seed, 0xe7a1);
  const QualityFn quality = consistency_quality(probe, data.num_classes(), data.dim(), schedule, q);

  EvolveConfig ec;
  ec.target_ms = resolve_target(e, genome_latency(start.genome(), table));
  ec.group_size = e.group_size;
  ec.rounds = e.rounds;
  ec.eval_steps = e.eval_steps;
  ec.cfg_scale = e.cfg_scale;

  TrainInterval train;
  if (e.train_steps_per_round > 0) {
    train = [&config, &data, schedule, e](Model& model, int round) {
      TrainConfig tc = config.train;
      tc.steps = e.train_steps_per_round;
      tc.skip = SkipConfig{e.execute_probability, {}};
      tc.seed = derive_seed(config.train.seed, 0x70b0 + static_cast<std::uint64_t>(round));
      fit(model, data, tc, schedule);
    };
  }
  return evolve(start, quality, table, ec, train);
}

DistillConfig hop_config(const ExperimentConfig& config, int teacher_steps, int student_steps, int steps,
                         std::uint64_t stream, bool cfg_aware) {
  DistillConfig d = config.distill;
  if (!cfg_aware) d.cfg_probability = 0.0;
  d.mode = DistillMode::Direct;
  d.teacher_steps = teacher_steps;
  d.student_steps = student_steps;
  d.steps = steps;
  d.seed = derive_seed(config.distill.seed, stream);
  d.validate();
  return d;
}

namespace {

class StageRunner {
 public:
  StageRunner(RunDir& run, bool resume, std::ostream* log, PipelineResult& result)
      : run_(run), resume_(resume), log_(log), result_(result) {}

  /// Runs `body` unless every output exists and resume is on.
  void stage(const std::string& name, std::vector<std::string> inputs, const std::vector<fs::path>& outputs,
             const std::function<void()>& body) {
    bool present = resume_;
    for (const fs::path& p : outputs) present = present && fs::exists(run_.root() / p);
    if (log_) *log_ << "[pipeline] " << name << (present ? " (cached)" : "") << std::endl;
    if (!present) {
      try {
        body();
      } catch (const std::exception& e) {
        throw Error("pipeline stage '" + name + "' failed: " + e.what());
      }
    }
    result_.stages.push_back({name, std::move(inputs), outputs.front().generic_string(), present});
  }

 private:
  RunDir& run_;
  bool resume_;
  std::ostream* log_;
  PipelineResult& result_;
};

void save_fit_logs(const fs::path& dir, const FitResult& fit, std::uint64_t seed, const std::string& hash) {
  write_metrics_csv(dir / "metrics.csv", fit.log, seed, hash);
  write_timing_csv(dir / "timing.csv", fit.log);
}

}  // namespace

PipelineResult reproduce_pipeline(const ExperimentConfig& config, RunDir& run, bool resume, std::ostream* log) {
  config.validate();
  const NoiseSchedule schedule = NoiseSchedule::from_name(config.schedule);
  const ConditionalDataset data = make_dataset(config.data);
  if (data.dim() != config.model.data_dim || data.num_classes() != config.model.num_classes)
    throw ConfigError("model", "data_dim/num_classes must match the dataset");
  const std::string hash = config.hash();

  PipelineResult result;
  result.root = run.root();
  StageRunner runner(run, resume, log, result);
  const fs::path ck = "checkpoints";
  const fs::path teacher_dir = ck / "teacher", teacher16_dir = ck / "teacher16", efficient_dir = ck / "efficient",
                 efficient16_dir = ck / "efficient16", efficient8_dir = ck / "efficient8";
  auto abs = [&](const fs::path& p) { return run.root() / p; };
  auto load = [&](const fs::path& p) { return Model::load(abs(p)); };

  runner.stage("teacher", {}, {teacher_dir / "manifest.json"}, [&] {
    Model teacher = build_model(config.genome, config.model, derive_seed(config.seed, 1));
    const FitResult fr = fit(teacher, data, config.train, schedule);
    teacher.save(abs(teacher_dir));
    save_fit_logs(abs(teacher_dir), fr, config.train.seed, hash);
  });

  runner.stage("teacher16", {teacher_dir.generic_string()}, {teacher16_dir / "manifest.json"}, [&] {
    const Model teacher = load(teacher_dir);
    const DistillConfig d = hop_config(config, 32, 16, config.pipeline.distill_steps_16, 2, false);
    const DistillResult r = distill(teacher, teacher, data, d, schedule);
    r.student.save(abs(teacher16_dir));
    write_distill_metrics_csv(abs(teacher16_dir) / "metrics.csv", r.stages, d.seed, hash);
  });

  const ConsistencyProbe probe = ConsistencyProbe::train(data, config.probe);

  runner.stage("efficient", {teacher_dir.generic_string()}, {efficient_dir / "manifest.json"}, [&] {
    const Model teacher = load(teacher_dir);
    const LatencyTable table = make_latency_table(config, teacher.genome());
    EvolveResult evolved = run_evolution(teacher, data, probe, config, table);
    Model& model = evolved.model;
    if (config.pipeline.finetune_steps > 0) {
      TrainConfig tc = config.train;
      tc.steps = config.pipeline.finetune_steps;
      tc.seed = derive_seed(config.train.seed, 0xf17e);
      const FitResult fr = fit(model, data, tc, schedule);
      fs::create_directories(abs(efficient_dir));
      save_fit_logs(abs(efficient_dir), fr, tc.seed, hash);
    }
    model.save(abs(efficient_dir));
    table.save(abs(efficient_dir) / "lut.txt");
    write_history_csv(abs(efficient_dir) / "history.csv", evolved.history);
    write_file_atomic(abs(efficient_dir) / "genome.json", evolved.genome.to_text() + "\n");
  });

  runner.stage("efficient16", {efficient_dir.generic_string()}, {efficient16_dir / "manifest.json"}, [&] {
    const Model efficient = load(efficient_dir);
    const DistillConfig d = hop_config(config, 32, 16, config.pipeline.distill_steps_16, 4, false);
    const DistillResult r = distill(efficient, efficient, data, d, schedule);
    r.student.save(abs(efficient16_dir));
    write_distill_metrics_csv(abs(efficient16_dir) / "metrics.csv", r.stages, d.seed, hash);
  });

  runner.stage("efficient8", {teacher16_dir.generic_string(), efficient16_dir.generic_string()},
               {efficient8_dir / "manifest.json"}, [&] {
                 const Model teacher16 = load(teacher16_dir);
                 const Model efficient16 = load(efficient16_dir);
                 const DistillConfig d = hop_config(config, 16, 8, config.pipeline.distill_steps_8, 5, true);
                 const DistillResult r = distill(teacher16, efficient16, data, d, schedule);
                 r.student.save(abs(efficient8_dir));
                 write_distill_metrics_csv(abs(efficient8_dir) / "metrics.csv", r.stages, d.seed, hash);
               });

  struct CurveSpec {
    std::string label;
    fs::path checkpoint;
    int steps;
  };
  const std::vector<CurveSpec> curves{{"teacher" + std::to_string(config.curve.teacher_steps), teacher_dir,
                                       config.curve.teacher_steps},
                                      {"efficient16", efficient16_dir, 16},
                                      {"efficient8", efficient8_dir, 8}};
  std::vector<fs::path> curve_files;
  for (const CurveSpec& c : curves) curve_files.push_back(fs::path("plots") / ("curve_" + c.label + ".csv"));

  runner.stage("curves",
               {teacher_dir.generic_string(), efficient16_dir.generic_string(), efficient8_dir.generic_string()},
               curve_files, [&] {
                 std::vector<std::pair<std::string, std::vector<TradeoffPoint>>> all;
                 for (std::size_t i = 0; i < curves.size(); ++i) {
                   const Model model = load(curves[i].checkpoint);
                   CurveOptions opt;
                   opt.steps = curves[i].steps;
                   opt.w_list = config.curve.w_list;
                   opt.n_samples = config.curve.n_samples;
                   opt.seed = config.curve.seed;
                   auto points = eval_curve(model, schedule, data, probe, opt);
                   write_curve_csv(abs(curve_files[i]), points, opt, hash);
                   all.emplace_back(curves[i].label, std::move(points));
                 }
                 write_curve_svg(run.plots() / "curves.svg", all);
               });

  json chain = json::array();
  for (const PipelineStageRecord& s : result.stages)
    chain.push_back({{"stage", s.name}, {"inputs", s.inputs}, {"output", s.output}, {"cached", s.cached}});
  write_file_atomic(run.root() / "pipeline.json", chain.dump(2) + "\n");
  run.set("pipeline", chain.dump());
  run.add_artifact("pipeline", "pipeline.json");
  for (std::size_t i = 0; i < curves.size(); ++i) {
    run.add_artifact("curve_" + curves[i].label, curve_files[i]);
    result.curves.push_back(run.root() / curve_files[i]);
  }
  run.add_artifact("efficient8", efficient8_dir / "manifest.json");
  run.add_artifact("history", efficient_dir / "history.csv");
  return result;
}

}  // namespace snaplab
