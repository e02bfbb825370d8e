#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "snaplab/optim.hpp"
#include "snaplab/sampler.hpp"

namespace snaplab {

enum class BlockKind { CrossAttention, ResNet };

std::string to_string(BlockKind kind);
char block_code(BlockKind kind);  // 'C' or 'R'
BlockKind block_kind_from_code(char c);

/// One stage of the U-shaped denoiser. `layout` is the execution order of the
/// stage's blocks; per-kind counts follow from it.
struct StageSpec {
  std::string name;
  int width = 0;
  std::vector<BlockKind> layout;

  int count(BlockKind kind) const;
  bool operator==(const StageSpec&) const = default;
};

/// Per-stage block composition: down stages, one mid stage, mirrored up stages.
struct ArchitectureGenome {
  std::vector<StageSpec> stages;

  /// Throws DomainError on: even stage count, non-positive width, up/down
  /// width mismatch, or zero blocks in total.
  void validate() const;
  int total_blocks() const;
  int mid_stage() const { return static_cast<int>(stages.size()) / 2; }

  /// Stages with ResNet/cross-attention blocks interleaved (R first).
  static ArchitectureGenome interleaved(const std::vector<std::string>& names, const std::vector<int>& widths,
                                        const std::vector<int>& cross_attention, const std::vector<int>& resnet);
  /// One ResNet and one cross-attention block per stage, widths {32, 64, 128}.
  static ArchitectureGenome desk_default();
  /// Block counts of the large reference UNet (stage names Down-1..Up-3),
  /// widths scaled down to the desk widths.
  static ArchitectureGenome reference_origin();
  /// Block counts of the evolved efficient UNet, same widths as reference_origin().
  static ArchitectureGenome reference_efficient();

  std::string to_text() const;
  static ArchitectureGenome from_text(const std::string& text);

  bool operator==(const ArchitectureGenome&) const = default;
};

/// Position of a block: stage, index among blocks of the same kind in that stage.
struct BlockSpec {
  int stage = 0;
  int index = 0;
  BlockKind kind = BlockKind::ResNet;
  int width = 0;

  auto operator<=>(const BlockSpec&) const = default;
};

std::string to_string(const BlockSpec& spec);

/// Probability that each block executes (instead of acting as identity).
struct SkipConfig {
  double execute_probability = 0.9;
  std::vector<double> per_block;  ///< overrides execute_probability when non-empty

  double probability(std::size_t block) const;
  void validate() const;
};

/// true = execute, false = identity. Indexed in model block order.
using SkipMask = std::vector<bool>;

SkipMask sample_skip_mask(const SkipConfig& config, std::size_t blocks, Rng& rng);

struct ModelConfig {
  int data_dim = 2;
  int num_classes = 8;
  int tokens = 4;           ///< condition tokens per label
  int token_dim = 16;
  int time_features = 16;
  int time_dim = 64;
  int attention_dim = 32;

  bool operator==(const ModelConfig&) const = default;
};

enum class ActionDirection { Add, Remove };

/// Remove targets an existing block. Add copies the block at `target` and
/// inserts the copy right after it.
struct Action {
  ActionDirection direction = ActionDirection::Remove;
  BlockSpec target;
};

std::string to_string(const Action& action);

struct Block {
  BlockKind kind = BlockKind::ResNet;
  int width = 0;
  std::uint64_t uid = 0;
  std::vector<Param> params;

  long parameter_count() const;
};

struct BlockInfo {
  BlockSpec spec;
  std::uint64_t uid = 0;
  std::size_t flat_index = 0;
  long parameters = 0;
};

/// Desk-scale conditional denoiser producing v-predictions. Copying a model
/// deep-copies its parameters.
class Model : public Denoiser {
 public:
  Model(ArchitectureGenome genome, ModelConfig config, std::uint64_t seed);

  Prediction predict(const LatentState& z, std::span<const int> labels) const override;
  int null_label() const override { return config_.num_classes; }
  Eigen::Index dim() const override { return config_.data_dim; }

  /// Differentiable v-prediction. Masked-off blocks are identities.
  ad::Var forward(const LatentState& z, std::span<const int> labels, const SkipMask* mask = nullptr) const;
  Prediction predict_masked(const LatentState& z, std::span<const int> labels, const SkipMask& mask) const;

  ArchitectureGenome genome() const;
  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  std::size_t num_blocks() const;
  std::vector<BlockInfo> blocks() const;
  std::size_t flat_index(const BlockSpec& spec) const;
  const Block& block(const BlockSpec& spec) const;

  std::vector<Param*> parameters();
  long parameter_count() const;
  long fixed_parameter_count() const;
  std::uint64_t checksum() const;

  /// Drops the block and returns it (weights intact).
  Block remove_block(const BlockSpec& spec);
  /// Inserts at `position` in the stage's execution order.
  void insert_block(int stage, std::size_t position, Block block);
  std::uint64_t next_uid() { return next_uid_++; }

  void save(const std::filesystem::path& dir) const;
  static Model load(const std::filesystem::path& dir);

 private:
  Model() = default;
  struct Stage {
    std::string name;
    int width = 0;
    std::vector<Block> blocks;
  };
  Block make_block(BlockKind kind, int width, Rng& rng);
  std::pair<std::size_t, std::size_t> locate(const BlockSpec& spec) const;  // (stage, position)

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::uint64_t next_uid_ = 0;
  std::vector<Stage> stages_;
  Param in_w_, in_b_, time_w_, time_b_, tokens_, out_w_, out_b_;
  std::vector<std::optional<std::pair<Param, Param>>> transitions_;
};

Model build_model(const ArchitectureGenome& genome, const ModelConfig& config, std::uint64_t seed);

/// Returns an edited copy; untouched parameters are copied bitwise.
Model mutate(const Model& model, const Action& action);

/// Parameters of one block of the given kind and width.
long block_parameter_count(BlockKind kind, int width, const ModelConfig& config);

/// Standalone block with random inputs, used for latency measurement.
class IsolatedBlock {
 public:
  IsolatedBlock(BlockKind kind, int width, const ModelConfig& config, int batch, std::uint64_t seed);
  /// Runs one inference forward; returns the output sum so callers can keep it alive.
  double run() const;

 private:
  Block block_;
  ModelConfig config_;
  Param tokens_;
  Tensor hidden_;
  Tensor time_embedding_;
  std::vector<int> labels_;
};

}  // namespace snaplab
