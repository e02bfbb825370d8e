#pragma once

#include <compare>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "snaplab/evaldata.hpp"
#include "snaplab/nets.hpp"

namespace snaplab {

struct LatencyKey {
  BlockKind kind = BlockKind::ResNet;
  int stage = 0;
  int width = 0;

  auto operator<=>(const LatencyKey&) const = default;
};

struct LatencyEntry {
  double latency_ms = 0.0;
  int reps = 0;
  std::string machine_id;

  bool operator==(const LatencyEntry&) const = default;
};

/// Additive per-block latency model keyed by (kind, stage, width).
class LatencyTable {
 public:
  /// Throws DomainError unless latency_ms > 0 and finite.
  void set(const LatencyKey& key, LatencyEntry entry);
  bool contains(const LatencyKey& key) const { return entries_.count(key) != 0; }
  /// Throws DomainError when the entry is missing.
  double at(const LatencyKey& key) const;
  double at(BlockKind kind, int stage, int width) const { return at(LatencyKey{kind, stage, width}); }
  const std::map<LatencyKey, LatencyEntry>& entries() const { return entries_; }

  /// One whitespace-separated record per line:
  /// kind stage width latency_ms reps machine_id
  std::string to_text() const;
  static LatencyTable from_text(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static LatencyTable load(const std::filesystem::path& path);

  bool operator==(const LatencyTable&) const = default;

 private:
  std::map<LatencyKey, LatencyEntry> entries_;
};

/// Milliseconds for one measurement of an isolated block.
using BlockBench = std::function<double(BlockKind kind, int stage, int width)>;

/// Every (kind, stage, width) slot a genome's stages could hold.
std::vector<LatencyKey> genome_space(const ArchitectureGenome& genome);

/// Median of `reps` (>= 3) measurements per slot. A throwing bench or a
/// non-positive/non-finite reading rejects the whole table (Error).
LatencyTable build_latency_table(std::span<const LatencyKey> space, const BlockBench& bench, int reps,
                                 const std::string& machine_id);

/// Wall-clock bench of IsolatedBlock::run at the given batch size.
BlockBench isolated_block_bench(const ModelConfig& config, int batch, int inner_iterations = 5);

/// Deterministic stand-in for measured latency: ms_per_kparam per thousand
/// block parameters. Used where bit-reproducible trajectories matter.
LatencyTable proxy_latency_table(std::span<const LatencyKey> space, const ModelConfig& config, double ms_per_kparam);

/// Hostname-based identifier written into table records.
std::string machine_id();

/// Sum of table entries over the genome's blocks.
double genome_latency(const ArchitectureGenome& genome, const LatencyTable& table);

/// Per-step latency times step count.
double total_latency(double per_step_ms, int steps);

/// Quality of `model` with masked-off blocks acting as identity (true = execute).
using QualityFn = std::function<double(const Model& model, const SkipMask& mask)>;

/// Denoiser view of a model under a fixed skip mask.
class MaskedModel : public Denoiser {
 public:
  MaskedModel(const Model& model, SkipMask mask) : model_(model), mask_(std::move(mask)) {}
  Prediction predict(const LatentState& z, std::span<const int> labels) const override {
    return model_.predict_masked(z, labels, mask_);
  }
  int null_label() const override { return model_.null_label(); }
  Eigen::Index dim() const override { return model_.dim(); }

 private:
  const Model& model_;
  SkipMask mask_;
};

struct ConsistencyQualityOptions {
  int eval_steps = 50;
  double cfg_scale = 7.5;
  Eigen::Index valset_size = 2048;
  std::uint64_t seed = 0x7a1;
};

/// Condition consistency of guided samples drawn from fixed noise; the
/// default quality proxy for evolution.
QualityFn consistency_quality(const ConsistencyProbe& probe, int num_classes, Eigen::Index dim,
                              const NoiseSchedule& schedule, const ConsistencyQualityOptions& options = {});

struct ActionScore {
  Action action;
  std::uint64_t uid = 0;  ///< block the action refers to
  double delta_quality = 0.0;
  double delta_latency = 0.0;
  double value = 0.0;  ///< delta_quality / delta_latency
};

/// REMOVE is evaluated with a skip mask, ADD by building the copied model.
/// The model is not modified. `base_quality` is quality(model, all-execute).
ActionScore evaluate_action(const Model& model, const Action& action, const QualityFn& quality,
                            const LatencyTable& table, double base_quality);

/// Removal scores of every block, sorted ascending by value with ties broken by
/// (stage, index, kind).
std::vector<ActionScore> score_removals(const Model& model, const QualityFn& quality, const LatencyTable& table,
                                        double base_quality);

struct EvolveConfig {
  double target_ms = 0.0;
  int group_size = 2;
  /// Rounds that include a robust-training interval.
  int rounds = 4;
  /// Extra removal-only rounds allowed after the budget while above target.
  int max_extra_rounds = 64;
  int eval_steps = 50;
  double cfg_scale = 7.5;

  void validate() const;
};

struct EvolveRecord {
  int round = 0;
  ArchitectureGenome genome;
  double latency_ms = 0.0;
  double quality = 0.0;
  std::vector<ActionScore> executed;
};

struct EvolveResult {
  Model model;
  ArchitectureGenome genome;
  std::vector<EvolveRecord> history;
};

/// Called at the start of each budgeted round (robust training interval).
using TrainInterval = std::function<void(Model& model, int round)>;

/// Alternates training, removal scoring and a group of edits: above the
/// target the group_size lowest-value blocks go, at or below it copies of
/// the highest-value blocks are added when they still fit. Ends once the
/// budget is spent with latency <= target. Throws DomainError when the target
/// is below the cheapest single block.
EvolveResult evolve(const Model& model, const QualityFn& quality, const LatencyTable& table,
                    const EvolveConfig& config, const TrainInterval& train = {});

/// history.csv: round, latency_ms, quality, blocks, executed, genome
void write_history_csv(const std::filesystem::path& path, std::span<const EvolveRecord> history);

}  // namespace snaplab
