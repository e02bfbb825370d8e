#include "snaplab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "snaplab/error.hpp"

namespace snaplab {

void TrainConfig::validate() const {
  if (steps <= 0) throw ConfigError("train.steps", "must be > 0");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be > 0");
  if (batch_size <= 0) throw ConfigError("train.batch_size", "must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
  if (!(cond_drop >= 0.0 && cond_drop <= 1.0)) throw ConfigError("train.cond_drop", "must lie in [0, 1]");
  if (log_every <= 0) throw ConfigError("train.log_every", "must be > 0");
  if (parameterization == PredictionKind::X) throw ConfigError("train.parameterization", "must be epsilon or v");
  if (skip) {
    try {
      skip->validate();
    } catch (const DomainError& e) {
      throw ConfigError("train.skip.execute_probability", e.what());
    }
  }
}

NoiseDraw NoiseDraw::draw(Eigen::Index n, Eigen::Index dim, Rng& rng) {
  NoiseDraw d;
  d.t.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) d.t(i) = rng.uniform();
  d.eps = rng.normal(n, dim);
  return d;
}

Tensor denoise_target(const NoiseSchedule& schedule, const Batch& batch, const NoiseDraw& noise,
                      PredictionKind parameterization) {
  switch (parameterization) {
    case PredictionKind::Epsilon:
      return noise.eps;
    case PredictionKind::V:
      return v_from_x_eps(schedule, batch.x, noise.eps, noise.t).value;
    case PredictionKind::X:
      return batch.x;
  }
  return {};
}

double denoise_loss(const Denoiser& model, const Batch& batch, const NoiseSchedule& schedule,
                    PredictionKind parameterization, const NoiseDraw& noise) {
  const LatentState z = diffuse(schedule, batch.x, noise.eps, noise.t);
  const Prediction pred = convert(schedule, model.predict(z, batch.labels), z, parameterization);
  const double loss = (pred.value - denoise_target(schedule, batch, noise, parameterization)).squaredNorm() /
                      static_cast<double>(pred.value.size());
  if (!std::isfinite(loss)) throw NonFiniteError("denoise_loss: non-finite loss");
  return loss;
}

ad::Var denoise_loss_var(const Model& model, const Batch& batch, const NoiseSchedule& schedule,
                         PredictionKind parameterization, const NoiseDraw& noise, const SkipMask* mask) {
  const LatentState z = diffuse(schedule, batch.x, noise.eps, noise.t);
  ad::Var pred = model.forward(z, batch.labels, mask);
  if (parameterization == PredictionKind::Epsilon) {
    Vector a, s;
    schedule.at(z.t, a, s);
    pred = ad::row_scale(pred, a) + ad::Var::constant(s.asDiagonal() * z.z);
  } else if (parameterization != PredictionKind::V) {
    throw DomainError("denoise_loss_var: parameterization must be epsilon or v");
  }
  const ad::Var target = ad::Var::constant(denoise_target(schedule, batch, noise, parameterization));
  ad::Var loss = ad::mean(ad::square(pred - target));
  if (!std::isfinite(loss.item())) throw NonFiniteError("denoise_loss: non-finite loss");
  return loss;
}

double evaluate_denoise_loss(const Denoiser& model, const DataSource& data, const NoiseSchedule& schedule,
                             PredictionKind parameterization, int batches, Eigen::Index batch_size,
                             std::uint64_t seed) {
  Rng rng(seed);
  double total = 0.0;
  for (int b = 0; b < batches; ++b) {
    const Batch batch = data.draw(batch_size, rng);
    const NoiseDraw noise = NoiseDraw::draw(batch_size, data.dim(), rng);
    total += denoise_loss(model, batch, schedule, parameterization, noise);
  }
  return total / batches;
}

void drop_conditions(std::vector<int>& labels, int null_label, double p, Rng& rng) {
  if (p <= 0.0) return;
  for (int& l : labels)
    if (rng.uniform() < p) l = null_label;
}

FitResult fit(Model& model, const DataSource& data, const TrainConfig& config, const NoiseSchedule& schedule) {
  config.validate();
  if (data.dim() != model.dim()) throw ShapeError("fit: data and model dimensions differ");
  AdamW opt(model.parameters(), {config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  Rng rng(config.seed);
  FitResult result;
  const auto start = std::chrono::steady_clock::now();
  for (int step = 1; step <= config.steps; ++step) {
    Batch batch = data.draw(config.batch_size, rng);
    drop_conditions(batch.labels, model.null_label(), config.cond_drop, rng);
    const NoiseDraw noise = NoiseDraw::draw(config.batch_size, data.dim(), rng);
    std::optional<SkipMask> mask;
    if (config.skip) mask = sample_skip_mask(*config.skip, model.num_blocks(), rng);

    opt.zero_grad();
    const ad::Var loss = denoise_loss_var(model, batch, schedule, config.parameterization, noise, mask ? &*mask : nullptr);
    const double value = loss.item();
    if (step == 1) result.initial_loss = value;
    if (value > config.divergence_factor * result.initial_loss) {
      std::ostringstream msg;
      msg << "fit diverged at step " << step << ": loss " << value << " > " << config.divergence_factor
          << " x initial " << result.initial_loss << "; log:";
      for (const auto& r : result.log) msg << " (" << r.step << ", " << r.loss << ")";
      throw DivergenceError(msg.str());
    }
    ad::backward(loss);
    opt.step();
    result.final_loss = value;
    if (step % config.log_every == 0 || step == 1 || step == config.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back({step, value, secs});
    }
  }
  return result;
}

}  // namespace snaplab
