#include "snaplab/decoder.hpp"

#include <cmath>
#include <fstream>
#include <unordered_set>

#include "json.hpp"
#include "snaplab/error.hpp"
#include "snaplab/npy.hpp"

namespace snaplab {

void DecoderSpec::validate() const {
  if (latent_channels < 1 || latent_size < 1 || image_channels < 1)
    throw DomainError("decoder spec: geometry must be positive");
  if (widths.size() != 3) throw DomainError("decoder spec: expects exactly three hidden widths");
  for (int w : widths)
    if (w < 1) throw DomainError("decoder spec: zero-channel layer");
}

DecoderSpec pruned_spec(const DecoderSpec& spec, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw DomainError("prune ratio must lie in (0, 1)");
  DecoderSpec out = spec;
  for (std::size_t i = 0; i < out.widths.size(); ++i) {
    out.widths[i] = static_cast<int>(std::lround(ratio * spec.widths[i]));
    if (out.widths[i] < 1) throw DomainError("prune ratio leaves layer " + std::to_string(i) + " with zero channels");
  }
  out.prune_ratio = spec.prune_ratio * ratio;
  return out;
}

ConvDecoder::ConvDecoder(DecoderSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  const std::vector<int> chans{spec_.latent_channels, spec_.widths[0], spec_.widths[1], spec_.widths[2],
                               spec_.image_channels};
  for (std::size_t i = 0; i + 1 < chans.size(); ++i) {
    const int cin = chans[i], cout = chans[i + 1];
    weights_.emplace_back(rng.normal(cout, cin * 9) * std::sqrt(1.0 / (cin * 9)));
    biases_.emplace_back(rng.normal(1, cout) * 0.1);
  }
}

ad::Var ConvDecoder::forward(const ad::Var& latents) const {
  if (latents.cols() != spec_.latent_dim()) throw ShapeError("decoder: latent size mismatch");
  const int s = spec_.latent_size;
  const auto& w = spec_.widths;
  ad::Var h = ad::silu(ad::conv3x3(latents, weights_[0].var(), biases_[0].var(), spec_.latent_channels, s, s));
  h = ad::upsample2x(h, w[0], s, s);
  h = ad::silu(ad::conv3x3(h, weights_[1].var(), biases_[1].var(), w[0], 2 * s, 2 * s));
  h = ad::upsample2x(h, w[1], 2 * s, 2 * s);
  h = ad::silu(ad::conv3x3(h, weights_[2].var(), biases_[2].var(), w[1], 4 * s, 4 * s));
  return ad::conv3x3(h, weights_[3].var(), biases_[3].var(), w[2], 4 * s, 4 * s);
}

Tensor ConvDecoder::decode(const Tensor& latents) const {
  ad::NoGradGuard guard;
  return forward(ad::Var::constant(latents)).value();
}

std::vector<Param*> ConvDecoder::parameters() {
  std::vector<Param*> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(&weights_[i]);
    out.push_back(&biases_[i]);
  }
  return out;
}

long ConvDecoder::parameter_count() const {
  long n = 0;
  for (std::size_t i = 0; i < weights_.size(); ++i) n += weights_[i].size() + biases_[i].size();
  return n;
}

std::uint64_t ConvDecoder::checksum() const {
  std::vector<const Tensor*> ts;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    ts.push_back(&weights_[i].value());
    ts.push_back(&biases_[i].value());
  }
  return snaplab::checksum(ts);
}

void ConvDecoder::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const nlohmann::json j = {{"latent_channels", spec_.latent_channels},
                            {"latent_size", spec_.latent_size},
                            {"image_channels", spec_.image_channels},
                            {"widths", spec_.widths},
                            {"prune_ratio", spec_.prune_ratio},
                            {"parameter_count", parameter_count()},
                            {"checksum", hex64(checksum())}};
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    write_npy(dir / ("w" + std::to_string(i) + ".npy"), weights_[i].value());
    write_npy(dir / ("b" + std::to_string(i) + ".npy"), biases_[i].value());
  }
  std::ofstream(dir / "decoder.json") << j.dump(2) << "\n";
}

ConvDecoder ConvDecoder::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "decoder.json");
  if (!in) throw Error("decoder checkpoint " + dir.string() + ": missing decoder.json");
  nlohmann::json j;
  try {
    in >> j;
    ConvDecoder d;
    d.spec_.latent_channels = j.at("latent_channels").get<int>();
    d.spec_.latent_size = j.at("latent_size").get<int>();
    d.spec_.image_channels = j.at("image_channels").get<int>();
    d.spec_.widths = j.at("widths").get<std::vector<int>>();
    d.spec_.prune_ratio = j.at("prune_ratio").get<double>();
    d.spec_.validate();
    for (std::size_t i = 0; i < 4; ++i) {
      d.weights_.emplace_back(read_npy(dir / ("w" + std::to_string(i) + ".npy")));
      d.biases_.emplace_back(read_npy(dir / ("b" + std::to_string(i) + ".npy")));
    }
    if (hex64(d.checksum()) != j.at("checksum").get<std::string>())
      throw Error("decoder checkpoint " + dir.string() + ": checksum mismatch");
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error("decoder checkpoint " + dir.string() + ": " + e.what());
  }
}

ConvDecoder prune_decoder(const ConvDecoder& teacher, double ratio, std::uint64_t seed) {
  return ConvDecoder(pruned_spec(teacher.spec(), ratio), seed);
}

Tensor shape_image(int label, int variant) {
  constexpr int kSize = 32;
  static const double palette[4][2][3] = {{{0.9, 0.2, 0.2}, {0.6, 0.1, 0.4}},
                                          {{0.2, 0.8, 0.3}, {0.1, 0.5, 0.2}},
                                          {{0.2, 0.3, 0.9}, {0.5, 0.6, 1.0}},
                                          {{0.9, 0.8, 0.2}, {1.0, 0.5, 0.1}}};
  if (label < 0 || label > 3 || variant < 0 || variant > 1) throw DomainError("shape_image: label 0..3, variant 0..1");
  const double cx = variant == 0 ? 15.5 : 19.5;
  const double cy = variant == 0 ? 15.5 : 12.5;
  Tensor img = Tensor::Zero(1, 3 * kSize * kSize);
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double r = std::sqrt(dx * dx + dy * dy);
      bool on = false;
      switch (label) {
        case 0: on = std::abs(dx) <= 8 && std::abs(dy) <= 8; break;
        case 1: on = r <= 9; break;
        case 2: on = (std::abs(dx) <= 3 && std::abs(dy) <= 11) || (std::abs(dy) <= 3 && std::abs(dx) <= 11); break;
        case 3: on = r >= 6 && r <= 11; break;
      }
      if (!on) continue;
      for (int c = 0; c < 3; ++c) img(0, (c * kSize + y) * kSize + x) = palette[label][variant][c];
    }
  }
  return img;
}

ConditionalDataset shape_latents(std::uint64_t seed) {
  constexpr int kSize = 32, kLatent = 8, kPool = kSize / kLatent, kChannels = 4;
  constexpr double kStd = 0.1;
  std::vector<GaussianMixture> classes;
  for (int label = 0; label < 4; ++label) {
    Tensor means(2, kChannels * kLatent * kLatent);
    for (int variant = 0; variant < 2; ++variant) {
      const Tensor img = shape_image(label, variant);
      auto px = [&](int c, int y, int x) { return img(0, (c * kSize + y) * kSize + x); };
      for (int ly = 0; ly < kLatent; ++ly) {
        for (int lx = 0; lx < kLatent; ++lx) {
          double rgb[3] = {0, 0, 0};
          for (int y = ly * kPool; y < (ly + 1) * kPool; ++y)
            for (int x = lx * kPool; x < (lx + 1) * kPool; ++x)
              for (int c = 0; c < 3; ++c) rgb[c] += px(c, y, x) / (kPool * kPool);
          const double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
          const double values[kChannels] = {rgb[0], rgb[1], rgb[2], luma};
          for (int c = 0; c < kChannels; ++c)
            means(variant, (c * kLatent + ly) * kLatent + lx) = 2.0 * values[c] - 1.0;
        }
      }
    }
    classes.emplace_back(std::vector<double>{0.5, 0.5}, means, Tensor::Constant(2, means.cols(), kStd * kStd));
  }
  return ConditionalDataset(std::move(classes), seed);
}

LatentSource::LatentSource(const Denoiser& denoiser, NoiseSchedule schedule, int num_classes, int steps,
                           double cfg_scale)
    : denoiser_(denoiser), schedule_(schedule), num_classes_(num_classes), steps_(steps), cfg_scale_(cfg_scale) {
  if (steps_ < 1) throw DomainError("LatentSource: steps must be >= 1");
  if (num_classes_ < 1) throw DomainError("LatentSource: need at least one class");
}

Tensor LatentSource::draw(Eigen::Index n, Rng& rng) const {
  const std::vector<int> labels = balanced_labels(n, num_classes_);
  return sample_from_noise(denoiser_, schedule_, steps_, rng.normal(n, denoiser_.dim()), labels,
                           GuidanceScale(cfg_scale_));
}

void DecoderDistillConfig::validate() const {
  if (steps <= 0) throw ConfigError("decoder.steps", "must be > 0");
  if (batch_size <= 0) throw ConfigError("decoder.batch_size", "must be > 0");
  if (!(learning_rate > 0.0)) throw ConfigError("decoder.learning_rate", "must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("decoder.weight_decay", "must be >= 0");
  if (log_every <= 0) throw ConfigError("decoder.log_every", "must be > 0");
}

double decoder_mse(const ConvDecoder& teacher, const ConvDecoder& student, const Tensor& latents) {
  const Tensor diff = teacher.decode(latents) - student.decode(latents);
  return diff.squaredNorm() / static_cast<double>(diff.size());
}

DecoderDistillResult distill_decoder(const ConvDecoder& teacher, ConvDecoder& student, const LatentSource& source,
                                     const DecoderDistillConfig& config) {
  config.validate();
  if (teacher.spec().latent_dim() != student.spec().latent_dim() ||
      teacher.spec().image_dim() != student.spec().image_dim())
    throw ShapeError("distill_decoder: teacher and student geometry differ");
  DecoderDistillResult result;
  result.teacher_checksum_before = teacher.checksum();
  AdamW opt(student.parameters(), {config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  Rng rng(config.seed);
  std::unordered_set<std::uint64_t> seen;

  for (int step = 1; step <= config.steps; ++step) {
    const Tensor latents = source.draw(config.batch_size, rng);
    for (Eigen::Index i = 0; i < latents.rows(); ++i) {
      const Eigen::RowVectorXd row = latents.row(i);
      seen.insert(fnv1a(std::string_view(reinterpret_cast<const char*>(row.data()),
                                         static_cast<std::size_t>(row.size()) * sizeof(double))));
    }
    result.latents_seen += latents.rows();
    const Tensor target = teacher.decode(latents);
    opt.zero_grad();
    const ad::Var loss = ad::mean(ad::square(student.forward(ad::Var::constant(latents)) - ad::Var::constant(target)));
    if (!std::isfinite(loss.item())) throw NonFiniteError("decoder distillation: non-finite loss at step " +
                                                          std::to_string(step));
    ad::backward(loss);
    opt.step();
    if (step % config.log_every == 0 || step == 1 || step == config.steps) result.log.emplace_back(step, loss.item());
  }
  result.distinct_latents = static_cast<long>(seen.size());
  result.teacher_checksum_after = teacher.checksum();
  if (result.teacher_checksum_after != result.teacher_checksum_before)
    throw Error("distill_decoder: teacher parameters changed");
  return result;
}

}  // namespace snaplab
