#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "snaplab/config.hpp"
#include "snaplab/run.hpp"

namespace snaplab {

/// Latency table for a genome per the evolve settings (proxy or measured).
LatencyTable make_latency_table(const ExperimentConfig& config, const ArchitectureGenome& genome);

/// Latency target in ms: target_ms when set, else target_fraction x latency(start).
double resolve_target(const EvolveSettings& settings, double start_latency);

/// Robust-training intervals plus latency-driven evolution of a copy of `start`,
/// scored by condition consistency.
EvolveResult run_evolution(const Model& start, const ConditionalDataset& data, const ConsistencyProbe& probe,
                           const ExperimentConfig& config, const LatencyTable& table);

/// Distill settings for one pipeline hop, teacher_steps -> student_steps.
/// Without `cfg_aware` the hop uses the vanilla loss only (cfg_probability 0).
DistillConfig hop_config(const ExperimentConfig& config, int teacher_steps, int student_steps, int steps,
                         std::uint64_t stream, bool cfg_aware);

struct PipelineStageRecord {
  std::string name;
  std::vector<std::string> inputs;  ///< checkpoint paths relative to the run root
  std::string output;
  bool cached = false;
};

struct PipelineResult {
  std::filesystem::path root;
  std::vector<PipelineStageRecord> stages;
  std::vector<std::filesystem::path> curves;  ///< teacher@50, efficient@16, efficient@8
};

/// base-train teacher -> vanilla distill teacher 32->16 -> evolve efficient
/// genome -> vanilla distill efficient 32->16 -> CFG-aware distill (16-step
/// teacher, student initialized from efficient 16) to 8 -> tradeoff curves.
/// With `resume`, stages whose outputs already exist are loaded instead of
/// recomputed. Stage failures are rethrown as Error naming the stage.
PipelineResult reproduce_pipeline(const ExperimentConfig& config, RunDir& run, bool resume, std::ostream* log = nullptr);

}  // namespace snaplab
