#include "snaplab/cli.hpp"

#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "snaplab/error.hpp"
#include "snaplab/pipeline.hpp"

namespace snaplab::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::string out;
  std::string name;
};

void add_common(CLI::App& app, Common& c) {
  app.add_option("--config", c.config_path, "experiment config (JSON)");
  app.add_option("--out", c.out, "run directory (default: $SNAPLAB_RUNS_DIR or ./runs, timestamped)");
  app.add_option("--name", c.name, "run name used in the directory name");
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config_path);
  if (!c.name.empty()) cfg.name = c.name;
  return cfg;
}

std::vector<double> parse_list(const std::string& text, const std::string& field) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(field, "'" + text + "' is not a comma-separated list of numbers");
    }
  }
  if (out.empty()) throw ConfigError(field, "empty list");
  return out;
}

ConditionalDataset checked_dataset(const ExperimentConfig& cfg) {
  ConditionalDataset data = make_dataset(cfg.data);
  if (data.dim() != cfg.model.data_dim || data.num_classes() != cfg.model.num_classes)
    throw ConfigError("model", "data_dim/num_classes must match the dataset");
  return data;
}

/// A checkpoint directory, or the dataset's exact oracle when `path` is empty.
std::unique_ptr<Denoiser> load_denoiser(const std::string& path, const ConditionalDataset& data,
                                        const NoiseSchedule& schedule) {
  if (path.empty() || path == "oracle") return std::make_unique<MixtureOracle>(data.oracle(schedule));
  return std::make_unique<Model>(Model::load(path));
}

using Runner = std::function<void(std::ostream&)>;

void cmd_train(CLI::App& app, Runner& run) {
  auto c = std::make_shared<Common>();
  auto steps = std::make_shared<std::optional<int>>();
  auto seed = std::make_shared<std::optional<std::uint64_t>>();
  auto lr = std::make_shared<std::optional<double>>();
  auto robust = std::make_shared<std::optional<double>>();
  auto* sub = app.add_subcommand("train", "train a denoiser on the toy dataset");
  add_common(*sub, *c);
  sub->add_option("--steps", *steps, "optimizer steps");
  sub->add_option("--seed", *seed, "training seed");
  sub->add_option("--lr", *lr, "learning rate");
  sub->add_option("--robust", *robust, "robust training: per-block execute probability");
  sub->callback([=, &run] {
    run = [=](std::ostream& out) {
      ExperimentConfig cfg = load_config(*c);
      if (*steps) cfg.train.steps = **steps;
      if (*seed) cfg.train.seed = **seed;
      if (*lr) cfg.train.learning_rate = **lr;
      if (*robust) cfg.train.skip = SkipConfig{**robust, {}};
      cfg.validate();
      const NoiseSchedule schedule = NoiseSchedule::from_name(cfg.schedule);
      const ConditionalDataset data = checked_dataset(cfg);
      RunDir dir("train", cfg, c->out);
      Model model = build_model(cfg.genome, cfg.model, derive_seed(cfg.seed, 1));
      const FitResult fr = fit(model, data, cfg.train, schedule);
      model.save(dir.checkpoints() / "final");
      write_metrics_csv(dir.root() / "metrics.csv", fr.log, cfg.train.seed, cfg.hash());
      write_timing_csv(dir.root() / "timing.csv", fr.log);
      dir.set_number("initial_loss", fr.initial_loss);
      dir.set_number("final_loss", fr.final_loss);
      dir.set_number("training_step", cfg.train.steps);
      dir.add_artifact("metrics", "metrics.csv");
      dir.add_artifact("timing", "timing.csv");
      dir.add_artifact("checkpoint", "checkpoints/final/manifest.json");
      dir.finalize();
      out << dir.root().string() << "\n";
    };
  });
}

void cmd_distill(CLI::App& app, Runner& run) {
  auto c = std::make_shared<Common>();
  auto teacher = std::make_shared<std::string>();
  auto student = std::make_shared<std::string>("init");
  auto mode = std::make_shared<std::optional<std::string>>();
  auto t_steps = std::make_shared<std::optional<int>>();
  auto s_steps = std::make_shared<std::optional<int>>();
  auto range = std::make_shared<std::optional<std::string>>();
  auto prob = std::make_shared<std::optional<double>>();
  auto gamma = std::make_shared<std::optional<double>>();
  auto gamma_mode = std::make_shared<std::optional<std::string>>();
  auto steps = std::make_shared<std::optional<int>>();
  auto* sub = app.add_subcommand("distill", "step distillation of a trained denoiser");
  add_common(*sub, *c);
  sub->add_option("--teacher", *teacher, "teacher checkpoint directory")->required();
  sub->add_option("--student", *student, "student checkpoint directory, or 'init' to start from the teacher");
  sub->add_option("--mode", *mode, "direct|progressive");
  sub->add_option("--teacher-steps", *t_steps, "teacher sampling steps");
  sub->add_option("--student-steps", *s_steps, "student sampling steps");
  sub->add_option("--cfg-range", *range, "w_min,w_max");
  sub->add_option("--cfg-prob", *prob, "probability of the CFG-aware loss per batch");
  sub->add_option("--gamma", *gamma, "original-loss weight");
  sub->add_option("--gamma-mode", *gamma_mode, "const|dynamic");
  sub->add_option("--steps", *steps, "total optimizer steps");
  sub->callback([=, &run] {
    run = [=](std::ostream& out) {
      ExperimentConfig cfg = load_config(*c);
      DistillConfig& d = cfg.distill;
      try {
        if (*mode) d.mode = distill_mode_from_string(**mode);
      } catch (const DomainError& e) {
        throw ConfigError("distill.mode", e.what());
      }
      try {
        if (*gamma_mode) d.gamma_mode = gamma_mode_from_string(**gamma_mode);
      } catch (const DomainError& e) {
        throw ConfigError("distill.gamma_mode", e.what());
      }
      if (*t_steps) d.teacher_steps = **t_steps;
      if (*s_steps) d.student_steps = **s_steps;
      if (*range) {
        const auto r = parse_list(**range, "distill.cfg_range");
        if (r.size() != 2) throw ConfigError("distill.cfg_range", "expects two values");
        d.w_min = r[0];
        d.w_max = r[1];
      }
      if (*prob) d.cfg_probability = **prob;
      if (*gamma) d.gamma = **gamma;
      if (*steps) d.steps = **steps;
      cfg.validate();
      const NoiseSchedule schedule = NoiseSchedule::from_name(cfg.schedule);
      const ConditionalDataset data = checked_dataset(cfg);
      RunDir dir("distill", cfg, c->out);
      const Model t = Model::load(*teacher);
      const Model s = *student == "init" ? t : Model::load(*student);
      const DistillResult r = distill(t, s, data, d, schedule);
      r.student.save(dir.checkpoints() / "student");
      for (std::size_t i = 0; i < r.intermediates.size(); ++i) {
        const std::string name = "stage" + std::to_string(i) + "_" + std::to_string(r.stages[i].student_steps);
        r.intermediates[i].save(dir.checkpoints() / name);
        dir.add_artifact("intermediate_" + name, "checkpoints/" + name + "/manifest.json");
      }
      write_distill_metrics_csv(dir.root() / "metrics.csv", r.stages, d.seed, cfg.hash());
      dir.set_string("teacher_checkpoint", fs::absolute(*teacher).string());
      dir.set_string("student_init", *student == "init" ? "teacher" : fs::absolute(*student).string());
      dir.add_artifact("metrics", "metrics.csv");
      dir.add_artifact("checkpoint", "checkpoints/student/manifest.json");
      dir.finalize();
      out << dir.root().string() << "\n";
    };
  });
}

void cmd_evolve(CLI::App& app, Runner& run) {
  auto c = std::make_shared<Common>();
  auto model_path = std::make_shared<std::string>();
  auto target = std::make_shared<std::optional<double>>();
  auto group = std::make_shared<std::optional<int>>();
  auto rounds = std::make_shared<std::optional<int>>();
  auto lut = std::make_shared<std::string>();
  auto* sub = app.add_subcommand("evolve", "latency-driven architecture evolution");
  add_common(*sub, *c);
  sub->add_option("--model", *model_path, "starting checkpoint directory")->required();
  sub->add_option("--target-ms", *target, "latency target S in ms");
  sub->add_option("--group-size", *group, "actions executed per round");
  sub->add_option("--rounds", *rounds, "rounds with a robust-training interval");
  sub->add_option("--lut", *lut, "latency table file (built when omitted)");
  sub->callback([=, &run] {
    run = [=](std::ostream& out) {
      ExperimentConfig cfg = load_config(*c);
      if (*target) cfg.evolve.target_ms = **target;
      if (*group) cfg.evolve.group_size = **group;
      if (*rounds) cfg.evolve.rounds = **rounds;
      cfg.validate();
      const ConditionalDataset data = checked_dataset(cfg);
      RunDir dir("evolve", cfg, c->out);
      const Model start = Model::load(*model_path);
      const LatencyTable table = lut->empty() ? make_latency_table(cfg, start.genome()) : LatencyTable::load(*lut);
      table.save(dir.root() / "lut.txt");
      const ConsistencyProbe probe = ConsistencyProbe::train(data, cfg.probe);
      const EvolveResult r = run_evolution(start, data, probe, cfg, table);
      r.model.save(dir.checkpoints() / "evolved");
      write_history_csv(dir.root() / "history.csv", r.history);
      write_file_atomic(dir.root() / "genome.json", r.genome.to_text() + "\n");
      dir.set_number("target_ms", resolve_target(cfg.evolve, genome_latency(start.genome(), table)));
      dir.set_number("eval_steps", cfg.evolve.eval_steps);
      dir.set_number("cfg_scale", cfg.evolve.cfg_scale);
      dir.set_string("probe_checksum", hex64(probe.checksum()));
      dir.add_artifact("history", "history.csv");
      dir.add_artifact("lut", "lut.txt");
      dir.add_artifact("genome", "genome.json");
      dir.add_artifact("checkpoint", "checkpoints/evolved/manifest.json");
      dir.finalize();
      out << dir.root().string() << "\n";
    };
  });
}

void cmd_sample(CLI::App& app, Runner& run) {
  auto c = std::make_shared<Common>();
  auto model_path = std::make_shared<std::string>();
  auto steps = std::make_shared<std::optional<int>>();
  auto w = std::make_shared<std::optional<double>>();
  auto seed = std::make_shared<std::optional<std::uint64_t>>();
  auto n = std::make_shared<std::optional<long>>();
  auto* sub = app.add_subcommand("sample", "DDIM sampling with classifier-free guidance");
  add_common(*sub, *c);
  sub->add_option("--model", *model_path, "checkpoint directory (default: exact oracle)");
  sub->add_option("--steps", *steps, "sampling steps");
  sub->add_option("--cfg-scale", *w, "guidance scale w");
  sub->add_option("--seed", *seed, "noise seed");
  sub->add_option("--n", *n, "number of samples");
  sub->callback([=, &run] {
    run = [=](std::ostream& out) {
      ExperimentConfig cfg = load_config(*c);
      if (*steps) cfg.sample.steps = **steps;
      if (*w) cfg.sample.cfg_scale = **w;
      if (*seed) cfg.sample.seed = **seed;
      if (*n) cfg.sample.n = **n;
      cfg.validate();
      const NoiseSchedule schedule = NoiseSchedule::from_name(cfg.schedule);
      const ConditionalDataset data = checked_dataset(cfg);
      RunDir dir("sample", cfg, c->out);
      const auto model = load_denoiser(*model_path, data, schedule);
      const std::vector<int> labels = balanced_labels(cfg.sample.n, data.num_classes());
      const Tensor xs =
          sample(*model, schedule, cfg.sample.steps, labels, GuidanceScale(cfg.sample.cfg_scale), cfg.sample.seed);
      write_samples(dir.root(), xs, labels);
      dir.set_string("model", model_path->empty() ? "oracle" : fs::absolute(*model_path).string());
      dir.add_artifact("samples", "samples.npy");
      dir.add_artifact("samples_csv", "samples.csv");
      dir.finalize();
      out << dir.root().string() << "\n";
    };
  });
}

void cmd_bench(CLI::App& app, Runner& run) {
  auto c = std::make_shared<Common>();
  auto reps = std::make_shared<std::optional<int>>();
  auto batch = std::make_shared<std::optional<int>>();
  auto* sub = app.add_subcommand("bench", "measure the per-block latency table");
  add_common(*sub, *c);
  sub->add_option("--reps", *reps, "measurements per entry (>= 3)");
  sub->add_option("--batch", *batch, "rows per block forward");
  sub->callback([=, &run] {
    run = [=](std::ostream& out) {
      ExperimentConfig cfg = load_config(*c);
      if (*reps) cfg.evolve.lut_reps = **reps;
      if (*batch) cfg.evolve.lut_batch = **batch;
      cfg.evolve.latency_source = LatencySource::Measured;
      cfg.validate();
      RunDir dir("bench", cfg, c->out);
      const LatencyTable table = make_latency_table(cfg, cfg.genome);
      table.save(dir.root() / "lut.txt");
      dir.set_number("genome_latency_ms", genome_latency(cfg.genome, table));
      dir.add_artifact("lut", "lut.txt");
      dir.finalize();
      out << dir.root().string() << "\n";
    };
  });
}

void cmd_decoder(CLI::App& app, Runner& run) {
  auto c = std::make_shared<Common>();
  auto teacher = std::make_shared<std::string>();
  auto ratio = std::make_shared<std::optional<double>>();
  auto steps = std::make_shared<std::optional<int>>();
  auto* sub = app.add_subcommand("decoder-distill", "prune and distill the image decoder");
  add_common(*sub, *c);
  sub->add_option("--teacher", *teacher,
                  "run directory holding checkpoints/decoder_teacher (default: seeded decoder)");
  sub->add_option("--ratio", *ratio, "uniform channel keep ratio");
  sub->add_option("--steps", *steps, "optimizer steps");
  sub->callback([=, &run] {
    run = [=](std::ostream& out) {
      ExperimentConfig cfg = load_config(*c);
      if (*ratio) cfg.decoder.ratio = **ratio;
      if (*steps) cfg.decoder.distill.steps = **steps;
      cfg.validate();
      const NoiseSchedule schedule = NoiseSchedule::from_name(cfg.schedule);
      RunDir dir("decoder-distill", cfg, c->out);
      const ConvDecoder t = teacher->empty() ? ConvDecoder(cfg.decoder.spec, cfg.decoder.teacher_seed)
                                             : ConvDecoder::load(fs::path(*teacher) / "checkpoints" / "decoder_teacher");
      t.save(dir.checkpoints() / "decoder_teacher");
      ConvDecoder student = prune_decoder(t, cfg.decoder.ratio, cfg.decoder.student_seed);
      const ConvDecoder untrained = student;
      const ConditionalDataset latents = shape_latents(cfg.data.seed);
      const MixtureOracle oracle = latents.oracle(schedule);
      const LatentSource source(oracle, schedule, latents.num_classes(), cfg.decoder.denoise_steps,
                                cfg.decoder.cfg_scale);
      Rng held_rng(derive_seed(cfg.decoder.distill.seed, 0x4e1d));
      const Tensor held = source.draw(cfg.decoder.heldout, held_rng);
      const double before = decoder_mse(t, untrained, held);
      const DecoderDistillResult r = distill_decoder(t, student, source, cfg.decoder.distill);
      const double after = decoder_mse(t, student, held);
      student.save(dir.checkpoints() / "decoder_student");
      char row[512];
      std::snprintf(row, sizeof row, "%ld,%ld,%.10g,%.10g,%.10g,%.10g,%d,%llu,%s\n", t.parameter_count(),
                    student.parameter_count(),
                    static_cast<double>(student.parameter_count()) / static_cast<double>(t.parameter_count()),
                    before, after, after / before, cfg.decoder.distill.steps,
                    static_cast<unsigned long long>(cfg.decoder.distill.seed), cfg.hash().c_str());
      write_file_atomic(dir.root() / "decoder_report.csv",
                        std::string("teacher_params,student_params,param_ratio,mse_before,mse_after,mse_ratio,steps,"
                                    "seed,config_hash\n") +
                            row);
      std::vector<MetricRecord> log;
      for (const auto& [step, loss] : r.log) log.push_back({step, loss, 0.0});
      write_metrics_csv(dir.root() / "metrics.csv", log, cfg.decoder.distill.seed, cfg.hash());
      dir.add_artifact("report", "decoder_report.csv");
      dir.add_artifact("metrics", "metrics.csv");
      dir.add_artifact("student", "checkpoints/decoder_student/decoder.json");
      dir.finalize();
      out << dir.root().string() << "\n";
    };
  });
}

void cmd_curve(CLI::App& app, Runner& run) {
  auto c = std::make_shared<Common>();
  auto model_path = std::make_shared<std::string>();
  auto steps = std::make_shared<std::optional<int>>();
  auto w_list = std::make_shared<std::optional<std::string>>();
  auto n = std::make_shared<std::optional<long>>();
  auto* sub = app.add_subcommand("eval-curve", "dist/consistency tradeoff over guidance scales");
  add_common(*sub, *c);
  sub->add_option("--model", *model_path, "checkpoint directory (default: exact oracle)");
  sub->add_option("--steps", *steps, "sampling steps");
  sub->add_option("--w-list", *w_list, "comma-separated guidance scales");
  sub->add_option("--n", *n, "samples per point (>= 1000)");
  sub->callback([=, &run] {
    run = [=](std::ostream& out) {
      ExperimentConfig cfg = load_config(*c);
      if (*steps) cfg.sample.steps = **steps;
      if (*w_list) cfg.curve.w_list = parse_list(**w_list, "curve.w_list");
      if (*n) cfg.curve.n_samples = **n;
      cfg.validate();
      const NoiseSchedule schedule = NoiseSchedule::from_name(cfg.schedule);
      const ConditionalDataset data = checked_dataset(cfg);
      RunDir dir("eval-curve", cfg, c->out);
      const auto model = load_denoiser(*model_path, data, schedule);
      const ConsistencyProbe probe = ConsistencyProbe::train(data, cfg.probe);
      CurveOptions opt;
      opt.steps = cfg.sample.steps;
      opt.w_list = cfg.curve.w_list;
      opt.n_samples = cfg.curve.n_samples;
      opt.seed = cfg.curve.seed;
      const auto points = eval_curve(*model, schedule, data, probe, opt);
      write_curve_csv(dir.root() / "curve.csv", points, opt, cfg.hash());
      const std::vector<std::pair<std::string, std::vector<TradeoffPoint>>> curves{
          {model_path->empty() ? "oracle" : fs::path(*model_path).filename().string(), points}};
      write_curve_svg(dir.plots() / "curve.svg", curves);
      dir.set_string("probe_checksum", hex64(probe.checksum()));
      dir.add_artifact("curve", "curve.csv");
      dir.add_artifact("plot", "plots/curve.svg");
      dir.finalize();
      out << dir.root().string() << "\n";
    };
  });
}

void cmd_reproduce(CLI::App& app, Runner& run) {
  auto c = std::make_shared<Common>();
  auto resume = std::make_shared<bool>(false);
  auto* sub = app.add_subcommand("reproduce", "full teacher -> efficient 8-step pipeline");
  add_common(*sub, *c);
  sub->add_flag("--resume", *resume, "reuse stage outputs already present in --out");
  sub->callback([=, &run] {
    run = [=](std::ostream& out) {
      ExperimentConfig cfg = load_config(*c);
      cfg.validate();
      if (*resume && c->out.empty()) throw ConfigError("--out", "--resume needs the run directory to resume");
      RunDir dir("reproduce", cfg, c->out);
      const PipelineResult r = reproduce_pipeline(cfg, dir, *resume, &out);
      dir.finalize();
      out << r.root.string() << "\n";
    };
  });
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"snaplab: desk-scale diffusion distillation and architecture evolution"};
  app.name("snaplab");
  app.require_subcommand(1, 1);
  Runner run;
  cmd_train(app, run);
  cmd_distill(app, run);
  cmd_evolve(app, run);
  cmd_sample(app, run);
  cmd_bench(app, run);
  cmd_decoder(app, run);
  cmd_curve(app, run);
  cmd_reproduce(app, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help arrives as a ParseError with exit code 0.
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    run(out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace snaplab::cli
