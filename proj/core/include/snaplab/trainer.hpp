#pragma once

#include <optional>
#include <string>
#include <vector>

#include "snaplab/data.hpp"
#include "snaplab/nets.hpp"

namespace snaplab {

struct TrainConfig {
  PredictionKind parameterization = PredictionKind::V;
  int batch_size = 256;
  int steps = 2000;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  /// Probability of replacing a label by the null label, so the model also
  /// learns the unconditional branch needed for guidance.
  double cond_drop = 0.1;
  std::optional<SkipConfig> skip;
  std::uint64_t seed = 0;
  int log_every = 50;
  double divergence_factor = 1e3;

  void validate() const;
};

/// Per-sample diffusion time and Gaussian noise for one loss evaluation.
struct NoiseDraw {
  Tensor eps;
  Vector t;

  /// t ~ U[0, 1], eps ~ N(0, I).
  static NoiseDraw draw(Eigen::Index n, Eigen::Index dim, Rng& rng);
};

/// Regression target for the parameterization: eps, or v = alpha eps - sigma x.
Tensor denoise_target(const NoiseSchedule& schedule, const Batch& batch, const NoiseDraw& noise,
                      PredictionKind parameterization);

/// Mean squared error of any denoiser against the parameterization target.
double denoise_loss(const Denoiser& model, const Batch& batch, const NoiseSchedule& schedule,
                    PredictionKind parameterization, const NoiseDraw& noise);

/// Differentiable version for a trainable model.
ad::Var denoise_loss_var(const Model& model, const Batch& batch, const NoiseSchedule& schedule,
                         PredictionKind parameterization, const NoiseDraw& noise, const SkipMask* mask = nullptr);

/// Held-out loss averaged over `batches` fixed draws from `seed`.
double evaluate_denoise_loss(const Denoiser& model, const DataSource& data, const NoiseSchedule& schedule,
                             PredictionKind parameterization, int batches, Eigen::Index batch_size,
                             std::uint64_t seed);

struct MetricRecord {
  long step = 0;
  double loss = 0.0;
  double wallclock = 0.0;
};

struct FitResult {
  std::vector<MetricRecord> log;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Replaces labels by the null label with probability `p`.
void drop_conditions(std::vector<int>& labels, int null_label, double p, Rng& rng);

/// AdamW training on the denoising objective. With `config.skip` set, each
/// step samples a fresh skip mask (robust training). Throws DivergenceError if
/// the loss exceeds divergence_factor times the first loss.
FitResult fit(Model& model, const DataSource& data, const TrainConfig& config, const NoiseSchedule& schedule);

}  // namespace snaplab
