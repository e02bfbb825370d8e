#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "snaplab/decoder.hpp"
#include "snaplab/distill.hpp"
#include "snaplab/evaldata.hpp"
#include "snaplab/evolve.hpp"
#include "snaplab/trainer.hpp"

namespace snaplab {

struct DataSettings {
  std::string type = "toy_2d";
  std::uint64_t seed = 0;
};

/// Where evolution gets per-block latencies from.
enum class LatencySource {
  Proxy,     ///< deterministic, proportional to block parameter count
  Measured,  ///< wall-clock benchmark of isolated blocks
};

struct EvolveSettings {
  /// Absolute target; when 0 the target is target_fraction x initial latency.
  double target_ms = 0.0;
  double target_fraction = 0.6;
  int group_size = 2;
  int rounds = 3;
  int train_steps_per_round = 150;
  double execute_probability = 0.9;
  int eval_steps = 50;
  double cfg_scale = 7.5;
  Eigen::Index valset_size = 512;
  LatencySource latency_source = LatencySource::Proxy;
  double proxy_ms_per_kparam = 0.01;
  int lut_reps = 5;
  int lut_batch = 256;
};

struct SampleSettings {
  int steps = 8;
  double cfg_scale = 7.5;
  Eigen::Index n = 1024;
  std::uint64_t seed = 1;
};

struct CurveSettings {
  std::vector<double> w_list{1.0, 2.0, 3.0, 5.0, 7.0, 10.0};
  Eigen::Index n_samples = 2048;
  std::uint64_t seed = 0;
  int teacher_steps = 50;
};

struct DecoderSettings {
  DecoderSpec spec;
  double ratio = 0.5;
  std::uint64_t teacher_seed = 11;
  std::uint64_t student_seed = 12;
  int denoise_steps = 50;
  double cfg_scale = 1.0;
  Eigen::Index heldout = 128;
  DecoderDistillConfig distill;
};

struct PipelineSettings {
  /// Plain training of the evolved model before it is distilled.
  int finetune_steps = 500;
  int distill_steps_16 = 600;
  int distill_steps_8 = 600;
};

/// One experiment: every subcommand reads the sections it needs.
struct ExperimentConfig {
  std::string name = "toy";
  std::uint64_t seed = 0;
  std::string schedule = "cosine";
  ArchitectureGenome genome = ArchitectureGenome::desk_default();
  ModelConfig model;
  DataSettings data;
  TrainConfig train;
  DistillConfig distill;
  EvolveSettings evolve;
  SampleSettings sample;
  CurveSettings curve;
  ProbeOptions probe;
  DecoderSettings decoder;
  PipelineSettings pipeline;

  /// Strict parse: unknown keys and type errors raise ConfigError naming the
  /// dotted field path. Missing keys keep their defaults.
  static ExperimentConfig from_text(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Canonical JSON with every field.
  std::string to_text() const;
  /// FNV-1a of the canonical text, hex.
  std::string hash() const;
  /// Runs every section's own validation.
  void validate() const;
};

ConditionalDataset make_dataset(const DataSettings& data);

}  // namespace snaplab
