#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "snaplab/evaldata.hpp"
#include "snaplab/optim.hpp"

namespace snaplab {

/// Convolutional upsampler from a latent_channels x 8 x 8 latent to an
/// image_channels x 32 x 32 image: conv, (upsample, conv) x 2, conv out.
/// Only the hidden widths are pruned.
struct DecoderSpec {
  int latent_channels = 4;
  int latent_size = 8;
  int image_channels = 3;
  std::vector<int> widths{32, 32, 16};
  double prune_ratio = 1.0;  ///< recorded ratio relative to the unpruned spec

  int image_size() const { return latent_size * 4; }
  Eigen::Index latent_dim() const { return static_cast<Eigen::Index>(latent_channels) * latent_size * latent_size; }
  Eigen::Index image_dim() const {
    return static_cast<Eigen::Index>(image_channels) * image_size() * image_size();
  }
  void validate() const;
  bool operator==(const DecoderSpec&) const = default;
};

/// round(ratio * w) per hidden layer; throws DomainError for ratio outside
/// (0, 1) or any layer rounding to zero channels.
DecoderSpec pruned_spec(const DecoderSpec& spec, double ratio);

class ConvDecoder {
 public:
  ConvDecoder(DecoderSpec spec, std::uint64_t seed);

  /// latents: n x latent_dim, images: n x image_dim (CHW).
  ad::Var forward(const ad::Var& latents) const;
  Tensor decode(const Tensor& latents) const;

  const DecoderSpec& spec() const { return spec_; }
  std::vector<Param*> parameters();
  long parameter_count() const;
  std::uint64_t checksum() const;

  /// decoder.json (spec, checksum) plus one .npy per tensor.
  void save(const std::filesystem::path& dir) const;
  static ConvDecoder load(const std::filesystem::path& dir);

 private:
  ConvDecoder() = default;
  DecoderSpec spec_;
  std::vector<Param> weights_;
  std::vector<Param> biases_;
};

/// Freshly initialized decoder with every hidden width scaled by `ratio`.
ConvDecoder prune_decoder(const ConvDecoder& teacher, double ratio, std::uint64_t seed);

/// Class-conditional latent data: per class, two Gaussian components whose
/// means are average-pooled procedural 32x32 shapes (RGB plus luma channel).
ConditionalDataset shape_latents(std::uint64_t seed = 0);

/// The procedural 3 x 32 x 32 image for (label, variant), CHW in [0, 1].
Tensor shape_image(int label, int variant);

/// Frozen generator of decoder inputs: DDIM sampling of a denoiser with fresh
/// noise on every draw.
class LatentSource {
 public:
  LatentSource(const Denoiser& denoiser, NoiseSchedule schedule, int num_classes, int steps = 50,
               double cfg_scale = 1.0);
  /// Latents for balanced labels, noise drawn from `rng`.
  Tensor draw(Eigen::Index n, Rng& rng) const;

 private:
  const Denoiser& denoiser_;
  NoiseSchedule schedule_;
  int num_classes_;
  int steps_;
  double cfg_scale_;
};

struct DecoderDistillConfig {
  int steps = 300;
  int batch_size = 32;
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int log_every = 25;

  void validate() const;
};

struct DecoderDistillResult {
  std::vector<std::pair<long, double>> log;  ///< (step, mse)
  long latents_seen = 0;
  long distinct_latents = 0;  ///< by bitwise hash
  std::uint64_t teacher_checksum_before = 0;
  std::uint64_t teacher_checksum_after = 0;
};

/// Mean squared error between teacher and student decodes of the same latents.
double decoder_mse(const ConvDecoder& teacher, const ConvDecoder& student, const Tensor& latents);

/// Trains `student` to match `teacher` on latents drawn on the fly.
DecoderDistillResult distill_decoder(const ConvDecoder& teacher, ConvDecoder& student, const LatentSource& source,
                                     const DecoderDistillConfig& config);

}  // namespace snaplab
