#include "snaplab/sampler.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "snaplab/error.hpp"

namespace snaplab {

GuidanceScale::GuidanceScale(double w) : w_(w) {
  if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("guidance scale must be finite and >= 0");
}

LatentState ddim_step(const NoiseSchedule& schedule, const LatentState& z, const Prediction& pred, double t_next) {
  return ddim_step(schedule, z, pred, Vector::Constant(z.rows(), t_next));
}

LatentState ddim_step(const NoiseSchedule& schedule, const LatentState& z, const Prediction& pred,
                      const Vector& t_next) {
  if (pred.value.rows() != z.z.rows() || pred.value.cols() != z.z.cols())
    throw ShapeError("ddim_step: prediction does not match latent shape");
  if (t_next.size() != z.rows()) throw ShapeError("ddim_step: one target time per row required");
  for (Eigen::Index i = 0; i < t_next.size(); ++i) {
    check_time(t_next(i));
    if (t_next(i) > z.t(i)) throw DomainError("ddim_step: t_next must not exceed t");
  }
  if (t_next == z.t) return z;

  // Rows that do not move are copied through untouched.
  LatentState moving = z;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    if (t_next(i) == z.t(i)) moving.t(i) = t_next(i);
  }
  const Tensor x_hat = convert(schedule, pred, z, PredictionKind::X).value;
  const Tensor eps_hat = convert(schedule, pred, z, PredictionKind::Epsilon).value;
  Vector a, s;
  schedule.at(t_next, a, s);
  LatentState out;
  out.z = a.asDiagonal() * x_hat + s.asDiagonal() * eps_hat;
  out.t = t_next;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    if (t_next(i) == z.t(i)) out.z.row(i) = z.z.row(i);
  }
  return out;
}

Prediction cfg_combine(const Prediction& cond, const Prediction& uncond, GuidanceScale w) {
  if (cond.kind != uncond.kind) throw DomainError("cfg_combine: parameterization mismatch");
  if (cond.value.rows() != uncond.value.rows() || cond.value.cols() != uncond.value.cols())
    throw ShapeError("cfg_combine: shape mismatch");
  if (w.is_identity()) return cond;
  if (w.value() == 0.0) return uncond;
  return {cond.kind, w.value() * cond.value - (w.value() - 1.0) * uncond.value};
}

Prediction guided_predict(const Denoiser& model, const LatentState& z, std::span<const int> labels, GuidanceScale w) {
  Prediction cond = model.predict(z, labels);
  if (w.is_identity()) return cond;
  const std::vector<int> null(labels.size(), model.null_label());
  return cfg_combine(cond, model.predict(z, null), w);
}

std::vector<double> uniform_time_grid(int n_steps) {
  if (n_steps < 1) throw DomainError("number of sampling steps must be >= 1");
  std::vector<double> grid(static_cast<std::size_t>(n_steps) + 1);
  for (int i = 0; i <= n_steps; ++i) grid[static_cast<std::size_t>(i)] = 1.0 - static_cast<double>(i) / n_steps;
  grid.back() = 0.0;
  return grid;
}

Tensor sample(const Denoiser& model, const NoiseSchedule& schedule, int n_steps, std::span<const int> labels,
              GuidanceScale w, std::uint64_t seed) {
  Rng rng(seed);
  return sample_from_noise(model, schedule, n_steps, rng.normal(static_cast<Eigen::Index>(labels.size()), model.dim()),
                           labels, w);
}

Tensor sample_from_noise(const Denoiser& model, const NoiseSchedule& schedule, int n_steps, Tensor noise,
                         std::span<const int> labels, GuidanceScale w) {
  if (noise.rows() != static_cast<Eigen::Index>(labels.size())) throw ShapeError("sample: one label per sample");
  const std::vector<double> grid = uniform_time_grid(n_steps);
  LatentState z = LatentState::uniform(std::move(noise), 1.0);
  for (int i = 0; i < n_steps; ++i) {
    const Prediction pred = guided_predict(model, z, labels, w);
    if (!pred.value.allFinite())
      throw NonFiniteError("sample: non-finite model output at step " + std::to_string(i) + " (t=" +
                           std::to_string(grid[static_cast<std::size_t>(i)]) + ")");
    z = ddim_step(schedule, z, pred, grid[static_cast<std::size_t>(i) + 1]);
    if (!z.z.allFinite())
      throw NonFiniteError("sample: non-finite latent after step " + std::to_string(i));
  }
  return z.z;
}

GaussianMixture::GaussianMixture(std::vector<double> weights, Tensor means, Tensor variances)
    : weights_(std::move(weights)), means_(std::move(means)), variances_(std::move(variances)) {
  if (weights_.empty()) throw DomainError("mixture needs at least one component");
  if (static_cast<Eigen::Index>(weights_.size()) != means_.rows() || means_.rows() != variances_.rows() ||
      means_.cols() != variances_.cols())
    throw ShapeError("mixture: weights/means/variances disagree in shape");
  double total = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0)) throw DomainError("mixture weights must be >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("mixture weights must sum to 1");
  if (!(variances_.array() >= 0.0).all() || !variances_.allFinite())
    throw DomainError("mixture variances must be finite and >= 0");
  if (!means_.allFinite()) throw DomainError("mixture means must be finite");
}

GaussianMixture GaussianMixture::point_mass(const Eigen::RowVectorXd& location) {
  return GaussianMixture({1.0}, Tensor(location), Tensor::Zero(1, location.size()));
}

GaussianMixture GaussianMixture::standard_normal(Eigen::Index dim) {
  return GaussianMixture({1.0}, Tensor::Zero(1, dim), Tensor::Ones(1, dim));
}

Tensor GaussianMixture::sample(Eigen::Index n, Rng& rng) const {
  std::discrete_distribution<int> pick(weights_.begin(), weights_.end());
  Tensor out(n, dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = pick(rng.engine());
    for (Eigen::Index j = 0; j < dim(); ++j) out(i, j) = means_(k, j) + std::sqrt(variances_(k, j)) * rng.normal();
  }
  return out;
}

GaussianMixture GaussianMixture::uniform_union(std::span<const GaussianMixture> parts) {
  if (parts.empty()) throw DomainError("uniform_union of no mixtures");
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p.components();
  std::vector<double> w;
  Tensor means(total, parts.front().dim());
  Tensor vars(total, parts.front().dim());
  Eigen::Index row = 0;
  for (const auto& p : parts) {
    if (p.dim() != means.cols()) throw ShapeError("uniform_union: dimension mismatch");
    for (Eigen::Index k = 0; k < p.components(); ++k, ++row) {
      w.push_back(p.weights()[static_cast<std::size_t>(k)] / static_cast<double>(parts.size()));
      means.row(row) = p.means().row(k);
      vars.row(row) = p.variances().row(k);
    }
  }
  // Renormalize away rounding so the sum-to-one invariant holds.
  double s = 0.0;
  for (double v : w) s += v;
  for (double& v : w) v /= s;
  return GaussianMixture(std::move(w), std::move(means), std::move(vars));
}

PosteriorMeans posterior_means(const GaussianMixture& mixture, const NoiseSchedule& schedule, const LatentState& z) {
  if (z.z.cols() != mixture.dim()) throw ShapeError("posterior_means: latent dimension mismatch");
  const Eigen::Index n = z.rows(), d = mixture.dim(), K = mixture.components();
  PosteriorMeans out{Tensor(n, d), Tensor(n, d)};
  std::vector<double> logr(static_cast<std::size_t>(K));
  Tensor var(K, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const AlphaSigma as = schedule.at(z.t(i));
    const double a = as.alpha, s = as.sigma;
    var = (a * a) * mixture.variances().array() + s * s;
    if ((var.array() <= 0.0).any())
      throw SingularityError("posterior_means: point-mass component at sigma_t = 0");

    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < K; ++k) {
      const auto diff = z.z.row(i).array() - a * mixture.means().row(k).array();
      const double quad = (diff.square() / var.row(k).array()).sum();
      const double logdet = var.row(k).array().log().sum();
      const double w = mixture.weights()[static_cast<std::size_t>(k)];
      logr[static_cast<std::size_t>(k)] =
          (w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity()) - 0.5 * (quad + logdet);
      mx = std::max(mx, logr[static_cast<std::size_t>(k)]);
    }
    if (!std::isfinite(mx)) throw NonFiniteError("posterior_means: all component responsibilities underflow");

    double norm = 0.0;
    for (double& l : logr) {
      l = std::exp(l - mx);
      norm += l;
    }
    out.x.row(i).setZero();
    out.eps.row(i).setZero();
    for (Eigen::Index k = 0; k < K; ++k) {
      const double r = logr[static_cast<std::size_t>(k)] / norm;
      if (r == 0.0) continue;
      const Eigen::ArrayXd diff = (z.z.row(i).array() - a * mixture.means().row(k).array()).transpose();
      const Eigen::ArrayXd inv_var = var.row(k).array().inverse().transpose();
      const Eigen::ArrayXd sk = mixture.variances().row(k).array().transpose();
      out.x.row(i).array() += r * (mixture.means().row(k).array() + (a * sk * inv_var * diff).transpose());
      out.eps.row(i).array() += r * (s * inv_var * diff).transpose();
    }
  }
  return out;
}

Prediction analytic_epsilon(const GaussianMixture& mixture, const NoiseSchedule& schedule, const LatentState& z) {
  for (Eigen::Index i = 0; i < z.t.size(); ++i) {
    if (schedule.at(z.t(i)).sigma <= kSingularTolerance)
      throw SingularityError("analytic_epsilon: sigma_t vanishes at t=" + std::to_string(z.t(i)));
  }
  return {PredictionKind::Epsilon, posterior_means(mixture, schedule, z).eps};
}

MixtureOracle::MixtureOracle(std::vector<GaussianMixture> per_class, NoiseSchedule schedule, PredictionKind output)
    : per_class_(std::move(per_class)),
      unconditional_(GaussianMixture::uniform_union(per_class_)),
      schedule_(schedule),
      output_(output) {}

const GaussianMixture& MixtureOracle::mixture(int label) const {
  if (label == null_label()) return unconditional_;
  if (label < 0 || label > null_label()) throw DomainError("MixtureOracle: label out of range");
  return per_class_[static_cast<std::size_t>(label)];
}

Prediction MixtureOracle::predict(const LatentState& z, std::span<const int> labels) const {
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) throw ShapeError("MixtureOracle: one label per row");
  for (int l : labels)
    if (l < 0 || l > null_label()) throw DomainError("MixtureOracle: label out of range");
  // Group rows by label so each mixture is evaluated once per call.
  Tensor x(z.rows(), z.z.cols()), eps(z.rows(), z.z.cols());
  for (int label = 0; label <= null_label(); ++label) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.empty()) continue;
    LatentState part;
    part.z.resize(static_cast<Eigen::Index>(rows.size()), z.z.cols());
    part.t.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      part.z.row(static_cast<Eigen::Index>(r)) = z.z.row(rows[r]);
      part.t(static_cast<Eigen::Index>(r)) = z.t(rows[r]);
    }
    const PosteriorMeans pm = posterior_means(mixture(label), schedule_, part);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      x.row(rows[r]) = pm.x.row(static_cast<Eigen::Index>(r));
      eps.row(rows[r]) = pm.eps.row(static_cast<Eigen::Index>(r));
    }
  }

  switch (output_) {
    case PredictionKind::X:
      return {PredictionKind::X, std::move(x)};
    case PredictionKind::Epsilon:
      return {PredictionKind::Epsilon, std::move(eps)};
    case PredictionKind::V: {
      Vector a, s;
      schedule_.at(z.t, a, s);
      return {PredictionKind::V, a.asDiagonal() * eps - s.asDiagonal() * x};
    }
  }
  return {};
}

}  // namespace snaplab
