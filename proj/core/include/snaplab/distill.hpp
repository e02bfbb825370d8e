#pragma once

#include <optional>
#include <string>
#include <vector>

#include "snaplab/data.hpp"
#include "snaplab/nets.hpp"
#include "snaplab/trainer.hpp"

namespace snaplab {

enum class GammaMode { Constant, Dynamic };
enum class DistillMode { Direct, Progressive };

std::string to_string(GammaMode mode);
std::string to_string(DistillMode mode);
GammaMode gamma_mode_from_string(const std::string& s);
DistillMode distill_mode_from_string(const std::string& s);

struct DistillConfig {
  int teacher_steps = 16;
  int student_steps = 8;
  double w_min = 2.0;
  double w_max = 14.0;
  double cfg_probability = 0.1;
  GammaMode gamma_mode = GammaMode::Dynamic;
  double gamma = 0.2;
  DistillMode mode = DistillMode::Direct;
  std::uint64_t seed = 0;

  /// Optimizer budget, shared equally by the stages of a progressive run.
  int steps = 1000;
  int batch_size = 256;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double cond_drop = 0.1;
  int log_every = 50;

  /// Checks ranges and that the teacher grid nests the student grid:
  /// DIRECT needs teacher = 2 x student, PROGRESSIVE teacher = 2^k x student.
  void validate() const;
  /// Number of halvings (1 for DIRECT).
  int stages() const;
};

/// Clean data, noise and one student-grid time per row.
struct DistillSample {
  Tensor x;
  std::vector<int> labels;
  Tensor eps;
  Vector t;
  int student_steps = 1;

  /// t = i / student_steps with i uniform in 1..student_steps.
  static DistillSample draw(const DataSource& data, Eigen::Index n, int student_steps, Rng& rng);
};

struct DistillTimes {
  Vector t, t_mid, t_next;  ///< (t, t - 1/(2 N_S), t - 1/N_S)
};

DistillTimes distill_times(const DistillSample& sample);

struct DistillBatchOutcome {
  double loss_total = 0.0;
  double loss_dstl = 0.0;
  double loss_ori = 0.0;
  double gamma_eff = 0.0;
  bool used_cfg = false;
  std::optional<double> w_sampled;
  /// Differentiable total; carries gradients when the student is a Model.
  ad::Var graph;
};

/// Two DDIM steps of a v-parameterized teacher, t -> t' -> t'' per row, with
/// optional classifier-free guidance at each step. z.t holds t.
Tensor teacher_two_steps(const Denoiser& teacher, const NoiseSchedule& schedule, const LatentState& z,
                         const Vector& t_mid, const Vector& t_next, std::span<const int> labels,
                         std::optional<GuidanceScale> guidance = std::nullopt);

/// The x a one-step student must predict so that its DDIM jump from z_t lands
/// on z_t'': (z_t'' - (s''/s) z_t) / (a'' - (s''/s) a).
Tensor vanilla_target(const NoiseSchedule& schedule, const LatentState& z_t, const Tensor& z_tpp,
                      const Vector& t_next);

/// One-step student landing: a'' x + s'' (z_t - a x) / s.
Tensor student_landing(const NoiseSchedule& schedule, const LatentState& z_t, const Tensor& x_hat,
                       const Vector& t_next);

inline constexpr double kSnrWeightCap = 1e4;

/// max(a^2 / s^2, 1), capped at kSnrWeightCap.
double snr_weight(const NoiseSchedule& schedule, double t);

/// Unguided loss  mean_rows(w_snr * |x_student - target|^2 / dim).
/// When `student` is a Model the result carries gradients.
DistillBatchOutcome vanilla_dstl_loss(const Denoiser& student, const Denoiser& teacher, const DistillSample& sample,
                                      const NoiseSchedule& schedule);

/// Same pipeline with both networks guided by scale w.
DistillBatchOutcome cfg_dstl_loss(const Denoiser& student, const Denoiser& teacher, const DistillSample& sample,
                                  const NoiseSchedule& schedule, double w);

/// Loss mixing plus the original v-loss on the same (x, eps, t):
/// CFG branch with probability p (w ~ U[w_min, w_max] per batch), then
/// total = dstl + gamma_eff * ori.
DistillBatchOutcome total_loss(const Denoiser& student, const Denoiser& teacher, const DistillSample& sample,
                               const NoiseSchedule& schedule, const DistillConfig& config, Rng& rng);

struct DistillRecord {
  long step = 0;
  double loss_total = 0.0;
  double loss_dstl = 0.0;
  double loss_ori = 0.0;
  bool used_cfg = false;
  double wallclock = 0.0;
};

struct DistillStage {
  int teacher_steps = 0;
  int student_steps = 0;
  std::vector<DistillRecord> log;
};

struct DistillResult {
  Model student;
  std::vector<DistillStage> stages;
  /// Students of every stage before the last (progressive only).
  std::vector<Model> intermediates;
};

/// DIRECT: one stage teacher_steps -> student_steps. PROGRESSIVE: halves from
/// teacher_steps, each stage's student becoming the next stage's teacher and
/// initialization.
DistillResult distill(const Denoiser& teacher, const Model& student_init, const DataSource& data,
                      const DistillConfig& config, const NoiseSchedule& schedule);

/// Held-out mean squared gap between the student's one-step landing and the
/// teacher's two-step landing over the student grid (unguided).
double landing_mse(const Denoiser& student, const Denoiser& teacher, const DataSource& data,
                   const NoiseSchedule& schedule, int student_steps, Eigen::Index n, std::uint64_t seed);

}  // namespace snaplab
