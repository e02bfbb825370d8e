#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "snaplab/data.hpp"
#include "snaplab/optim.hpp"
#include "snaplab/sampler.hpp"

namespace snaplab {

/// Class-conditional data with a Gaussian mixture per label.
class ConditionalDataset : public DataSource {
 public:
  ConditionalDataset(std::vector<GaussianMixture> per_class, std::uint64_t seed);

  /// Eight classes on a ring in 2-D, two tight components per class.
  static ConditionalDataset toy_2d(std::uint64_t seed = 0);

  Batch draw(Eigen::Index n, Rng& rng) const override;
  int num_classes() const override { return static_cast<int>(per_class_.size()); }
  Eigen::Index dim() const override { return per_class_.front().dim(); }

  /// Labels cycle 0, 1, ..., K-1 so every class is equally represented.
  Batch draw_balanced(Eigen::Index n, std::uint64_t seed) const;
  /// Deterministic in (label, dataset seed, index).
  Eigen::RowVectorXd sample(int label, std::uint64_t index) const;

  const std::vector<GaussianMixture>& mixtures() const { return per_class_; }
  std::uint64_t seed() const { return seed_; }
  MixtureOracle oracle(const NoiseSchedule& schedule, PredictionKind output = PredictionKind::V) const;

 private:
  std::vector<GaussianMixture> per_class_;
  std::uint64_t seed_;
};

std::vector<int> balanced_labels(Eigen::Index n, int num_classes);

struct SlicedWassersteinOptions {
  int projections = 256;
  std::uint64_t seed = 0x5eed;
  Eigen::Index min_samples = 1000;
};

/// Exact 1-Wasserstein distance between two 1-D empirical distributions.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

/// Sliced 1-Wasserstein distance with a fixed set of random directions. Named
/// `dist` in every artifact; it stands in for FID and is not FID.
double distribution_distance(const Tensor& samples, const Tensor& reference, const SlicedWassersteinOptions& options = {});

/// RMS per-dimension standard deviation, the unit for relative distances.
double data_scale(const Tensor& reference);

struct ProbeOptions {
  int steps = 1500;
  int batch_size = 256;
  int hidden = 64;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0x9b0be;
};

/// Frozen classifier used by the condition-consistency metric.
class ConsistencyProbe {
 public:
  static ConsistencyProbe train(const DataSource& data, const ProbeOptions& options = {});

  /// n x classes softmax probabilities.
  Tensor probabilities(const Tensor& x) const;
  std::uint64_t checksum() const;
  int num_classes() const { return static_cast<int>(w3_.value().cols()); }

 private:
  ConsistencyProbe() = default;
  ad::Var logits(const Tensor& x) const;
  Param w1_, b1_, w2_, b2_, w3_, b3_;
};

/// Mean probe probability of the intended label, in [0, 1]. Stands in for a
/// CLIP score. Throws Error if the probe checksum differs from `expected_checksum`.
double condition_consistency(const Tensor& samples, std::span<const int> labels, const ConsistencyProbe& probe,
                             std::uint64_t expected_checksum);

struct TradeoffPoint {
  double w = 1.0;
  double dist = 0.0;
  double consistency = 0.0;
};

struct CurveOptions {
  int steps = 8;
  std::vector<double> w_list;
  Eigen::Index n_samples = 2048;
  std::uint64_t seed = 0;
};

/// One point per guidance scale (duplicates kept) with fixed seeds.
std::vector<TradeoffPoint> eval_curve(const Denoiser& model, const NoiseSchedule& schedule,
                                      const ConditionalDataset& data, const ConsistencyProbe& probe,
                                      const CurveOptions& options);

/// Columns: w, dist, consistency, steps, n_samples, seed, config_hash.
void write_curve_csv(const std::filesystem::path& path, std::span<const TradeoffPoint> points,
                     const CurveOptions& options, const std::string& config_hash);
/// dist (x) against consistency (y), one polyline per curve.
void write_curve_svg(const std::filesystem::path& path,
                     std::span<const std::pair<std::string, std::vector<TradeoffPoint>>> curves);

/// Uniform grid lo, lo+step, ..., <= hi (+1e-9 slack).
std::vector<double> guidance_grid(double lo, double hi, double step);

}  // namespace snaplab
