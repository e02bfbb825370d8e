#pragma once

#include <span>
#include <vector>

#include "snaplab/schedule.hpp"

namespace snaplab {

/// Anything that maps (z_t, t, condition) to a prediction. Implementations must
/// be safe to call concurrently through a const reference.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Prediction predict(const LatentState& z, std::span<const int> labels) const = 0;
  /// Reserved label selecting the unconditional branch.
  virtual int null_label() const = 0;
  virtual Eigen::Index dim() const = 0;
};

/// Classifier-free guidance scale, w >= 0. w = 1 is the plain conditional model.
class GuidanceScale {
 public:
  explicit GuidanceScale(double w);
  double value() const { return w_; }
  bool is_identity() const { return w_ == 1.0; }

 private:
  double w_;
};

/// One deterministic DDIM jump z_t -> z_t' via the prediction's implied (x, eps).
/// Rows whose t_next equals t are returned unchanged.
LatentState ddim_step(const NoiseSchedule& schedule, const LatentState& z, const Prediction& pred, double t_next);
LatentState ddim_step(const NoiseSchedule& schedule, const LatentState& z, const Prediction& pred,
                      const Vector& t_next);

/// w * cond - (w - 1) * uncond.
Prediction cfg_combine(const Prediction& cond, const Prediction& uncond, GuidanceScale w);

/// Conditional prediction, guided against the null label unless w == 1.
Prediction guided_predict(const Denoiser& model, const LatentState& z, std::span<const int> labels, GuidanceScale w);

/// t_i = 1 - i / n_steps for i = 0..n_steps.
std::vector<double> uniform_time_grid(int n_steps);

/// Full DDIM sampling loop from N(0, I) noise drawn with `seed`; one label per sample.
Tensor sample(const Denoiser& model, const NoiseSchedule& schedule, int n_steps, std::span<const int> labels,
              GuidanceScale w, std::uint64_t seed);
/// Same loop starting from explicit noise at t = 1.
Tensor sample_from_noise(const Denoiser& model, const NoiseSchedule& schedule, int n_steps, Tensor noise,
                         std::span<const int> labels, GuidanceScale w);

/// Mixture of axis-aligned Gaussians. A zero variance row denotes a point mass.
class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, Tensor means, Tensor variances);

  static GaussianMixture point_mass(const Eigen::RowVectorXd& location);
  static GaussianMixture standard_normal(Eigen::Index dim);

  Eigen::Index dim() const { return means_.cols(); }
  Eigen::Index components() const { return means_.rows(); }
  const std::vector<double>& weights() const { return weights_; }
  const Tensor& means() const { return means_; }
  const Tensor& variances() const { return variances_; }

  Tensor sample(Eigen::Index n, Rng& rng) const;

  /// Equal-weight union of several mixtures (used for the unconditional branch).
  static GaussianMixture uniform_union(std::span<const GaussianMixture> parts);

 private:
  std::vector<double> weights_;
  Tensor means_;
  Tensor variances_;
};

struct PosteriorMeans {
  Tensor x;    ///< E[x | z_t]
  Tensor eps;  ///< E[eps | z_t]
};

/// Bayes-optimal denoiser for mixture data, computed per row from the
/// component responsibilities. Throws SingularityError when a component has
/// zero variance at sigma_t = 0, NonFiniteError when every responsibility
/// underflows.
PosteriorMeans posterior_means(const GaussianMixture& mixture, const NoiseSchedule& schedule, const LatentState& z);

/// E[eps | z_t] as an EPSILON prediction. Requires sigma_t > kSingularTolerance.
Prediction analytic_epsilon(const GaussianMixture& mixture, const NoiseSchedule& schedule, const LatentState& z);

/// Exact denoiser for class-conditional mixture data. The null label uses the
/// equal-weight union of the class mixtures.
class MixtureOracle : public Denoiser {
 public:
  MixtureOracle(std::vector<GaussianMixture> per_class, NoiseSchedule schedule,
                PredictionKind output = PredictionKind::V);

  Prediction predict(const LatentState& z, std::span<const int> labels) const override;
  int null_label() const override { return static_cast<int>(per_class_.size()); }
  Eigen::Index dim() const override { return per_class_.front().dim(); }

  const GaussianMixture& mixture(int label) const;

 private:
  std::vector<GaussianMixture> per_class_;
  GaussianMixture unconditional_;
  NoiseSchedule schedule_;
  PredictionKind output_;
};

}  // namespace snaplab
