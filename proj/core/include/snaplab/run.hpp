#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "snaplab/config.hpp"

namespace snaplab {

/// Root for new run directories: $SNAPLAB_RUNS_DIR, else ./runs.
std::filesystem::path runs_root();

/// A run directory `<root>/<timestamp>-<name>/` with manifest.json,
/// metrics.csv, checkpoints/ and plots/. The manifest is written atomically
/// (temp file + rename) when the run starts and again when it is finalized.
class RunDir {
 public:
  /// Uses `explicit_dir` when non-empty, otherwise a fresh timestamped
  /// directory under runs_root().
  RunDir(const std::string& command, const ExperimentConfig& config, const std::filesystem::path& explicit_dir = {});
  ~RunDir();
  RunDir(RunDir&&) noexcept;
  RunDir& operator=(RunDir&&) noexcept;

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path checkpoints() const { return root_ / "checkpoints"; }
  std::filesystem::path plots() const { return root_ / "plots"; }

  /// Registers an output file (relative paths resolve against root()).
  void add_artifact(const std::string& role, const std::filesystem::path& path);
  /// Stores a manifest value given as JSON text.
  void set(const std::string& key, const std::string& json_text);
  void set_string(const std::string& key, const std::string& value);
  void set_number(const std::string& key, double value);
  /// Records status and wallclock, checks every artifact exists, rewrites the manifest.
  void finalize(const std::string& status = "ok");

 private:
  void write_manifest() const;
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::filesystem::path root_;
};

/// Writes `text` to `path` through a sibling temp file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

/// metrics.csv: step, loss, seed, config_hash.
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRecord> log, std::uint64_t seed,
                       const std::string& config_hash);
/// timing.csv: step, wallclock.
void write_timing_csv(const std::filesystem::path& path, std::span<const MetricRecord> log);
/// Distillation logs, one row per record and stage.
void write_distill_metrics_csv(const std::filesystem::path& path, std::span<const DistillStage> stages,
                               std::uint64_t seed, const std::string& config_hash);

/// samples.npy plus samples.csv (index, label, x0, x1, ...).
void write_samples(const std::filesystem::path& dir, const Tensor& samples, std::span<const int> labels);

std::string code_version();

}  // namespace snaplab
