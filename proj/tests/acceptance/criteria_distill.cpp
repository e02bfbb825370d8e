// Criteria that train models: step-distillation efficacy, the direct vs
// progressive report, the robust-training ablation test and the decoder.

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>

#include "criteria.hpp"
#include "snaplab/decoder.hpp"
#include "snaplab/distill.hpp"
#include "snaplab/evolve.hpp"
#include "snaplab/run.hpp"
#include "snaplab/trainer.hpp"

namespace snaplab::acceptance {

namespace {

const NoiseSchedule kCos = NoiseSchedule::cosine();
const std::vector<double> kGuidance{3.0, 5.0, 7.0};
constexpr int kDistillBudget = 1000;
constexpr Eigen::Index kEvalSamples = 4096;

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

/// Teacher, probe and distilled students shared by criteria 6 and 7.
struct DistillBench {
  ConditionalDataset data = ConditionalDataset::toy_2d(0);
  Model teacher = build_model(ArchitectureGenome::desk_default(), ModelConfig{}, derive_seed(0, 1));
  ConsistencyProbe probe = ConsistencyProbe::train(data);
  double floor = 0.0;
  std::vector<TradeoffPoint> teacher16;
  std::optional<Model> direct;

  DistillBench() {
    fit(teacher, data, TrainConfig{}, kCos);
    floor = landing_mse(teacher, teacher, data, kCos, 8, kEvalSamples, 9);
    teacher16 = curve(teacher, 16);
  }

  std::vector<TradeoffPoint> curve(const Denoiser& model, int steps) const {
    CurveOptions o;
    o.steps = steps;
    o.w_list = kGuidance;
    o.n_samples = kEvalSamples;
    return eval_curve(model, kCos, data, probe, o);
  }

  /// Unguided distillation (CFG probability 0) from the teacher's weights.
  Model distill_to_8(DistillMode mode, int teacher_steps) const {
    DistillConfig d;
    d.mode = mode;
    d.teacher_steps = teacher_steps;
    d.student_steps = 8;
    d.cfg_probability = 0.0;
    d.steps = kDistillBudget;
    return snaplab::distill(teacher, teacher, data, d, kCos).student;
  }

  const Model& direct_student() {
    if (!direct) direct = distill_to_8(DistillMode::Direct, 16);
    return *direct;
  }

  double landing(const Denoiser& student) const { return landing_mse(student, teacher, data, kCos, 8, kEvalSamples, 9); }
};

DistillBench& bench() {
  static std::unique_ptr<DistillBench> b;
  if (!b) b = std::make_unique<DistillBench>();
  return *b;
}

}  // namespace

Outcome distillation_efficacy(const Context& ctx) {
  DistillBench& b = bench();
  const Model& student = b.direct_student();
  const double mse = b.landing(student);
  const double ratio = mse / b.floor;
  const std::vector<TradeoffPoint> s8 = b.curve(student, 8);

  bool dist_ok = true;
  std::string rel_text;
  std::string csv = "w,teacher16_dist,student8_dist,relative_change\n";
  for (std::size_t i = 0; i < kGuidance.size(); ++i) {
    const double rel = s8[i].dist / b.teacher16[i].dist - 1.0;
    dist_ok = dist_ok && std::abs(rel) <= 0.2;
    rel_text += (i ? ", " : "") + fmt(100 * rel, 3) + "%";
    csv += fmt(kGuidance[i]) + "," + fmt(b.teacher16[i].dist, 8) + "," + fmt(s8[i].dist, 8) + "," + fmt(rel, 6) + "\n";
  }
  write_file_atomic(ctx.out / "distill_efficacy.csv", csv);
  return {ratio <= 10.0 && dist_ok, "landing MSE " + fmt(mse) + " = " + fmt(ratio, 3) +
                                        "x floor (<= 10); dist change vs 16-step teacher at w=3,5,7: " + rel_text +
                                        " (within 20%)"};
}

Outcome direct_vs_progressive(const Context& ctx) {
  DistillBench& b = bench();
  const Model& direct = b.direct_student();
  const Model progressive = b.distill_to_8(DistillMode::Progressive, 32);

  struct Row {
    std::string method;
    int teacher_steps;
    const Model* model;
  };
  const Row rows[] = {{"direct", 16, &direct}, {"progressive", 32, &progressive}};
  std::string csv = "method,teacher_steps,student_steps,budget,landing_mse,landing_ratio";
  for (double w : kGuidance) csv += ",dist_w" + fmt(w) + ",consistency_w" + fmt(w);
  csv += "\n";
  double landing[2];
  bool finite = true;
  for (int r = 0; r < 2; ++r) {
    landing[r] = b.landing(*rows[r].model);
    const std::vector<TradeoffPoint> pts = b.curve(*rows[r].model, 8);
    csv += rows[r].method + "," + std::to_string(rows[r].teacher_steps) + ",8," + std::to_string(kDistillBudget) +
           "," + fmt(landing[r], 8) + "," + fmt(landing[r] / b.floor, 6);
    for (const TradeoffPoint& p : pts) {
      csv += "," + fmt(p.dist, 8) + "," + fmt(p.consistency, 8);
      finite = finite && std::isfinite(p.dist) && std::isfinite(p.consistency);
    }
    csv += "\n";
    finite = finite && std::isfinite(landing[r]);
  }
  const auto path = ctx.out / "direct_vs_progressive.csv";
  write_file_atomic(path, csv);
  return {finite && std::filesystem::exists(path),
          "landing MSE direct " + fmt(landing[0]) + " vs progressive " + fmt(landing[1]) + "; direct " +
              (landing[0] <= landing[1] ? "wins" : "loses") + " (reported only); " + path.string()};
}

Outcome robust_training_effect(const Context& ctx) {
  constexpr int kSeeds = 3;
  constexpr Eigen::Index kSamples = 4096;
  const ConditionalDataset data = ConditionalDataset::toy_2d(0);
  const Tensor reference = data.draw_balanced(kSamples, 77).x;
  const std::vector<int> labels = balanced_labels(kSamples, data.num_classes());
  Rng noise_rng(5);
  const Tensor noise = noise_rng.normal(kSamples, data.dim());

  // Quality proxy: dist of 16-step unguided samples, lower is better.
  auto mean_degradation = [&](const Model& m) {
    auto dist = [&](const SkipMask& mask) {
      const MaskedModel view(m, mask);
      return distribution_distance(sample_from_noise(view, kCos, 16, noise, labels, GuidanceScale(1.0)), reference);
    };
    const SkipMask full(m.num_blocks(), true);
    const double base = dist(full);
    double total = 0.0;
    for (std::size_t b = 0; b < m.num_blocks(); ++b) {
      SkipMask mask = full;
      mask[b] = false;
      total += dist(mask) - base;
    }
    return total / static_cast<double>(m.num_blocks());
  };

  std::string csv = "seed,baseline_degradation,robust_degradation,difference\n";
  std::vector<double> diff;
  for (int s = 0; s < kSeeds; ++s) {
    double deg[2];
    for (int robust = 0; robust < 2; ++robust) {
      Model m = build_model(ArchitectureGenome::desk_default(), ModelConfig{}, derive_seed(100 + s, 1));
      TrainConfig tc;
      tc.steps = 1000;
      tc.seed = static_cast<std::uint64_t>(s);
      if (robust) tc.skip = SkipConfig{0.9, {}};
      fit(m, data, tc, kCos);
      deg[robust] = mean_degradation(m);
    }
    diff.push_back(deg[0] - deg[1]);
    csv += std::to_string(s) + "," + fmt(deg[0], 8) + "," + fmt(deg[1], 8) + "," + fmt(diff.back(), 8) + "\n";
  }
  write_file_atomic(ctx.out / "robust_training.csv", csv);

  // One-sided paired t-test, H1: baseline degrades more than robust.
  const double n = kSeeds;
  const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1));
  const double t = mean / (sd / std::sqrt(n));
  const boost::math::students_t dist(n - 1);
  const double p = boost::math::cdf(boost::math::complement(dist, t));
  return {p < 0.05, std::to_string(kSeeds) + " seeds, mean degradation gap " + fmt(mean) + ", t = " + fmt(t) +
                        ", one-sided p = " + fmt(p, 3) + " (< 0.05)"};
}

Outcome decoder_pipeline(const Context& ctx) {
  const DecoderSettings settings;
  const ConvDecoder teacher(settings.spec, settings.teacher_seed);
  ConvDecoder student = prune_decoder(teacher, settings.ratio, settings.student_seed);
  const ConvDecoder untrained = student;
  const double param_ratio =
      static_cast<double>(student.parameter_count()) / static_cast<double>(teacher.parameter_count());

  const ConditionalDataset latents = shape_latents(0);
  const MixtureOracle oracle = latents.oracle(kCos);
  const LatentSource source(oracle, kCos, latents.num_classes(), settings.denoise_steps, settings.cfg_scale);
  Rng held_rng(derive_seed(settings.distill.seed, 0x4e1d));
  const Tensor held = source.draw(settings.heldout, held_rng);
  const double before = decoder_mse(teacher, untrained, held);
  distill_decoder(teacher, student, source, settings.distill);
  const double after = decoder_mse(teacher, student, held);
  const double mse_ratio = after / before;

  write_file_atomic(ctx.out / "decoder.csv", "teacher_params,student_params,param_ratio,mse_before,mse_after\n" +
                                                 std::to_string(teacher.parameter_count()) + "," +
                                                 std::to_string(student.parameter_count()) + "," +
                                                 fmt(param_ratio, 6) + "," + fmt(before, 8) + "," + fmt(after, 8) +
                                                 "\n");
  const bool pass = std::abs(param_ratio - 0.26) <= 0.03 && mse_ratio <= 0.1;
  return {pass, "param ratio " + fmt(param_ratio) + " (0.26 +/- 0.03); held-out MSE " + fmt(after) + " vs " +
                    fmt(before) + " undistilled, ratio " + fmt(mse_ratio, 3) + " (<= 0.1)"};
}

}  // namespace snaplab::acceptance
