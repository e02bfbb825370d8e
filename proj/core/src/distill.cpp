#include "snaplab/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "snaplab/error.hpp"

namespace snaplab {

std::string to_string(GammaMode mode) { return mode == GammaMode::Constant ? "const" : "dynamic"; }
std::string to_string(DistillMode mode) { return mode == DistillMode::Direct ? "direct" : "progressive"; }

GammaMode gamma_mode_from_string(const std::string& s) {
  if (s == "const" || s == "constant") return GammaMode::Constant;
  if (s == "dynamic") return GammaMode::Dynamic;
  throw DomainError("unknown gamma mode '" + s + "' (const|dynamic)");
}

DistillMode distill_mode_from_string(const std::string& s) {
  if (s == "direct") return DistillMode::Direct;
  if (s == "progressive") return DistillMode::Progressive;
  throw DomainError("unknown distill mode '" + s + "' (direct|progressive)");
}

int DistillConfig::stages() const {
  if (mode == DistillMode::Direct) return 1;
  int k = 0;
  for (int n = teacher_steps; n > student_steps; n /= 2) ++k;
  return k;
}

void DistillConfig::validate() const {
  if (student_steps < 1) throw ConfigError("distill.student_steps", "must be >= 1");
  if (teacher_steps <= student_steps) throw ConfigError("distill.teacher_steps", "must exceed student_steps");
  if (mode == DistillMode::Direct) {
    if (teacher_steps != 2 * student_steps)
      throw ConfigError("distill.teacher_steps", "direct mode needs teacher_steps = 2 x student_steps");
  } else {
    int n = teacher_steps;
    while (n > student_steps && n % 2 == 0) n /= 2;
    if (n != student_steps)
      throw ConfigError("distill.teacher_steps", "progressive mode needs teacher_steps = 2^k x student_steps");
  }
  if (!(w_min >= 0.0)) throw ConfigError("distill.cfg_range", "w_min must be >= 0");
  if (!(w_min <= w_max)) throw ConfigError("distill.cfg_range", "w_min must be <= w_max");
  if (!(cfg_probability >= 0.0 && cfg_probability <= 1.0))
    throw ConfigError("distill.cfg_probability", "must lie in [0, 1]");
  if (!(gamma >= 0.0)) throw ConfigError("distill.gamma", "must be >= 0");
  if (steps < stages()) throw ConfigError("distill.steps", "must be >= number of stages");
  if (batch_size <= 0) throw ConfigError("distill.batch_size", "must be > 0");
  if (!(learning_rate > 0.0)) throw ConfigError("distill.learning_rate", "must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("distill.weight_decay", "must be >= 0");
  if (!(cond_drop >= 0.0 && cond_drop <= 1.0)) throw ConfigError("distill.cond_drop", "must lie in [0, 1]");
  if (log_every <= 0) throw ConfigError("distill.log_every", "must be > 0");
}

DistillSample DistillSample::draw(const DataSource& data, Eigen::Index n, int student_steps, Rng& rng) {
  if (student_steps < 1) throw DomainError("DistillSample: student_steps must be >= 1");
  Batch b = data.draw(n, rng);
  DistillSample s;
  s.x = std::move(b.x);
  s.labels = std::move(b.labels);
  s.eps = rng.normal(n, data.dim());
  s.t.resize(n);
  for (Eigen::Index i = 0; i < n; ++i)
    s.t(i) = static_cast<double>(rng.uniform_int(1, student_steps)) / student_steps;
  s.student_steps = student_steps;
  return s;
}

DistillTimes distill_times(const DistillSample& sample) {
  const double n = sample.student_steps;
  DistillTimes times;
  times.t = sample.t;
  times.t_mid = (sample.t.array() - 0.5 / n).matrix();
  times.t_next = (sample.t.array() - 1.0 / n).matrix();
  // Snap tiny negative rounding at the final student step.
  times.t_next = times.t_next.cwiseMax(0.0);
  return times;
}

Tensor teacher_two_steps(const Denoiser& teacher, const NoiseSchedule& schedule, const LatentState& z,
                         const Vector& t_mid, const Vector& t_next, std::span<const int> labels,
                         std::optional<GuidanceScale> guidance) {
  if (t_mid.size() != z.t.size() || t_next.size() != z.t.size())
    throw ShapeError("teacher_two_steps: one time per row required");
  for (Eigen::Index i = 0; i < z.t.size(); ++i) {
    if (!(0.0 <= t_next(i) && t_next(i) < t_mid(i) && t_mid(i) < z.t(i) && z.t(i) <= 1.0))
      throw DomainError("teacher_two_steps: need 0 <= t'' < t' < t <= 1 (row " + std::to_string(i) + ")");
  }
  const GuidanceScale w = guidance.value_or(GuidanceScale(1.0));
  const LatentState z_mid =
      ddim_step(schedule, z, convert(schedule, guided_predict(teacher, z, labels, w), z, PredictionKind::V), t_mid);
  if (!all_finite(z_mid.z)) throw NonFiniteError("teacher_two_steps: non-finite latent after first step");
  const LatentState z_end = ddim_step(
      schedule, z_mid, convert(schedule, guided_predict(teacher, z_mid, labels, w), z_mid, PredictionKind::V), t_next);
  if (!all_finite(z_end.z)) throw NonFiniteError("teacher_two_steps: non-finite latent after second step");
  return z_end.z;
}

Tensor vanilla_target(const NoiseSchedule& schedule, const LatentState& z_t, const Tensor& z_tpp,
                      const Vector& t_next) {
  if (z_tpp.rows() != z_t.z.rows() || z_tpp.cols() != z_t.z.cols() || t_next.size() != z_t.t.size())
    throw ShapeError("vanilla_target: shape mismatch");
  Tensor target(z_tpp.rows(), z_tpp.cols());
  for (Eigen::Index i = 0; i < z_tpp.rows(); ++i) {
    const AlphaSigma now = schedule.at(z_t.t(i));
    const AlphaSigma next = schedule.at(t_next(i));
    if (now.sigma <= kSingularTolerance) throw SingularityError("vanilla_target: sigma_t vanishes");
    const double ratio = next.sigma / now.sigma;
    const double denom = next.alpha - ratio * now.alpha;
    if (std::abs(denom) <= 1e-8) throw SingularityError("vanilla_target: t and t'' have equal SNR");
    target.row(i) = (z_tpp.row(i) - ratio * z_t.z.row(i)) / denom;
  }
  return target;
}

Tensor student_landing(const NoiseSchedule& schedule, const LatentState& z_t, const Tensor& x_hat,
                       const Vector& t_next) {
  Tensor out(x_hat.rows(), x_hat.cols());
  for (Eigen::Index i = 0; i < x_hat.rows(); ++i) {
    const AlphaSigma now = schedule.at(z_t.t(i));
    const AlphaSigma next = schedule.at(t_next(i));
    if (now.sigma <= kSingularTolerance) throw SingularityError("student_landing: sigma_t vanishes");
    out.row(i) = next.alpha * x_hat.row(i) + next.sigma * (z_t.z.row(i) - now.alpha * x_hat.row(i)) / now.sigma;
  }
  return out;
}

double snr_weight(const NoiseSchedule& schedule, double t) {
  const AlphaSigma as = schedule.at(t);
  if (as.sigma <= kSingularTolerance) throw SingularityError("snr_weight: sigma_t vanishes");
  const double snr = (as.alpha * as.alpha) / (as.sigma * as.sigma);
  return std::min(std::max(snr, 1.0), kSnrWeightCap);
}

namespace {

/// v-prediction as a graph node: differentiable for Model, constant otherwise.
ad::Var student_v(const Denoiser& student, const NoiseSchedule& schedule, const LatentState& z,
                  std::span<const int> labels) {
  if (const auto* model = dynamic_cast<const Model*>(&student)) return model->forward(z, labels);
  return ad::Var::constant(convert(schedule, student.predict(z, labels), z, PredictionKind::V).value);
}

struct DstlParts {
  DistillBatchOutcome outcome;
  ad::Var v_cond;  // unguided conditional student output, reused by the original loss
};

DstlParts dstl_core(const Denoiser& student, const Denoiser& teacher, const DistillSample& sample,
                    const NoiseSchedule& schedule, std::optional<double> w) {
  if (sample.x.rows() != sample.eps.rows() || sample.x.cols() != sample.eps.cols() ||
      static_cast<Eigen::Index>(sample.labels.size()) != sample.x.rows() || sample.t.size() != sample.x.rows())
    throw ShapeError("distillation batch: inconsistent shapes");
  const DistillTimes times = distill_times(sample);
  const LatentState z = diffuse(schedule, sample.x, sample.eps, times.t);

  Tensor z_tpp;
  {
    ad::NoGradGuard no_grad;
    std::optional<GuidanceScale> guidance;
    if (w) guidance = GuidanceScale(*w);
    z_tpp = teacher_two_steps(teacher, schedule, z, times.t_mid, times.t_next, sample.labels, guidance);
  }
  const Tensor target = vanilla_target(schedule, z, z_tpp, times.t_next);

  DstlParts parts;
  parts.v_cond = student_v(student, schedule, z, sample.labels);
  ad::Var v = parts.v_cond;
  if (w) {
    const std::vector<int> null_labels(sample.labels.size(), student.null_label());
    const ad::Var v_uncond = student_v(student, schedule, z, null_labels);
    v = (*w) * parts.v_cond - (*w - 1.0) * v_uncond;
  }

  Vector alpha, sigma;
  schedule.at(z.t, alpha, sigma);
  const ad::Var x_hat = ad::row_scale(v, -sigma) + ad::Var::constant(alpha.asDiagonal() * z.z);
  Vector weight(z.t.size());
  for (Eigen::Index i = 0; i < weight.size(); ++i) weight(i) = snr_weight(schedule, z.t(i));
  const ad::Var loss = ad::mean(ad::row_scale(ad::square(x_hat - ad::Var::constant(target)), weight));
  if (!std::isfinite(loss.item())) throw NonFiniteError("distillation loss is not finite");

  parts.outcome.loss_dstl = loss.item();
  parts.outcome.loss_total = loss.item();
  parts.outcome.used_cfg = w.has_value();
  parts.outcome.w_sampled = w;
  parts.outcome.graph = loss;
  return parts;
}

}  // namespace

DistillBatchOutcome vanilla_dstl_loss(const Denoiser& student, const Denoiser& teacher, const DistillSample& sample,
                                      const NoiseSchedule& schedule) {
  return dstl_core(student, teacher, sample, schedule, std::nullopt).outcome;
}

DistillBatchOutcome cfg_dstl_loss(const Denoiser& student, const Denoiser& teacher, const DistillSample& sample,
                                  const NoiseSchedule& schedule, double w) {
  static_cast<void>(GuidanceScale(w));  // rejects w < 0
  return dstl_core(student, teacher, sample, schedule, w).outcome;
}

DistillBatchOutcome total_loss(const Denoiser& student, const Denoiser& teacher, const DistillSample& sample,
                               const NoiseSchedule& schedule, const DistillConfig& config, Rng& rng) {
  const bool use_cfg = rng.uniform() < config.cfg_probability;
  std::optional<double> w;
  if (use_cfg) w = config.w_min == config.w_max ? config.w_min : rng.uniform(config.w_min, config.w_max);
  DstlParts parts = dstl_core(student, teacher, sample, schedule, w);

  const Tensor v_target = v_from_x_eps(schedule, sample.x, sample.eps, sample.t).value;
  const ad::Var ori = ad::mean(ad::square(parts.v_cond - ad::Var::constant(v_target)));

  DistillBatchOutcome out = parts.outcome;
  out.loss_ori = ori.item();
  out.gamma_eff = config.gamma_mode == GammaMode::Constant
                      ? config.gamma
                      : config.gamma * out.loss_dstl / std::max(out.loss_ori, 1e-8);
  out.loss_total = out.loss_dstl + out.gamma_eff * out.loss_ori;
  out.graph = parts.outcome.graph + out.gamma_eff * ori;
  if (!std::isfinite(out.loss_total)) throw NonFiniteError("distillation total loss is not finite");
  return out;
}

DistillResult distill(const Denoiser& teacher, const Model& student_init, const DataSource& data,
                      const DistillConfig& config, const NoiseSchedule& schedule) {
  config.validate();
  if (teacher.dim() != student_init.dim() || data.dim() != student_init.dim())
    throw ShapeError("distill: teacher, student and data dimensions differ");
  if (teacher.null_label() != student_init.null_label())
    throw ShapeError("distill: teacher and student disagree on the null label");

  const int n_stages = config.stages();
  DistillResult result{student_init, {}, {}};
  std::optional<Model> frozen;  // previous stage's student acting as teacher
  const auto start = std::chrono::steady_clock::now();

  for (int s = 0; s < n_stages; ++s) {
    const int teacher_steps = config.teacher_steps >> s;
    const int student_steps = teacher_steps / 2;
    const int stage_steps = config.steps / n_stages + (s == n_stages - 1 ? config.steps % n_stages : 0);
    const Denoiser& current_teacher = frozen ? static_cast<const Denoiser&>(*frozen) : teacher;

    Model& student = result.student;
    AdamW opt(student.parameters(), {config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(s)));
    DistillStage stage{teacher_steps, student_steps, {}};

    for (int step = 1; step <= stage_steps; ++step) {
      DistillSample sample = DistillSample::draw(data, config.batch_size, student_steps, rng);
      drop_conditions(sample.labels, student.null_label(), config.cond_drop, rng);
      opt.zero_grad();
      const DistillBatchOutcome out = total_loss(student, current_teacher, sample, schedule, config, rng);
      ad::backward(out.graph);
      opt.step();
      if (step % config.log_every == 0 || step == 1 || step == stage_steps) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        stage.log.push_back({step, out.loss_total, out.loss_dstl, out.loss_ori, out.used_cfg, secs});
      }
    }
    result.stages.push_back(std::move(stage));
    if (s + 1 < n_stages) {
      result.intermediates.push_back(result.student);
      frozen = result.student;
    }
  }
  return result;
}

double landing_mse(const Denoiser& student, const Denoiser& teacher, const DataSource& data,
                   const NoiseSchedule& schedule, int student_steps, Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  const DistillSample sample = DistillSample::draw(data, n, student_steps, rng);
  const DistillTimes times = distill_times(sample);
  const LatentState z = diffuse(schedule, sample.x, sample.eps, times.t);
  const Tensor z_tpp = teacher_two_steps(teacher, schedule, z, times.t_mid, times.t_next, sample.labels);
  const Tensor x_hat = convert(schedule, student.predict(z, sample.labels), z, PredictionKind::X).value;
  const Tensor landed = student_landing(schedule, z, x_hat, times.t_next);
  return (landed - z_tpp).squaredNorm() / static_cast<double>(landed.size());
}

}  // namespace snaplab
