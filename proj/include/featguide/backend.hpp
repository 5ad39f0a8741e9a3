#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "featguide/attention.hpp"
#include "featguide/tensor.hpp"

namespace featguide {

inline constexpr std::size_t kDecoderLayers = 4;

enum class SpaceTag { image, latent };

/// A [channels, height, width] tensor in the denoiser's latent space.
struct Latent {
  Tensor data;
  SpaceTag space = SpaceTag::latent;

  std::size_t channels() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }

  friend bool operator==(const Latent&, const Latent&) = default;
};

/// 8-bit interleaved RGB.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  friend bool operator==(const Image&, const Image&) = default;
};

enum class ScheduleKind { linear, scaled_linear };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::scaled_linear;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  int train_steps = 1000;
};

/// Where inside a decoder block the correspondence features are read.
enum class FeatureSite { block_output, pre_attention };

struct LayerDims {
  std::size_t channels = 0;
  /// Image pixels per feature cell.
  std::size_t scale = 1;
};

struct BackendProfile {
  std::string name = "toy";
  std::size_t latent_channels = 4;
  std::size_t latent_height = 16;
  std::size_t latent_width = 16;
  /// Image pixels per latent cell.
  std::size_t image_downscale = 1;
  std::size_t decoder_layer_count = kDecoderLayers;
  std::array<LayerDims, kDecoderLayers> feature_dims{};
  std::size_t attention_head_dim = 8;
  ScheduleSpec schedule;
  /// Default number of sampling steps T.
  int steps = 50;
  FeatureSite feature_site = FeatureSite::block_output;
  std::uint64_t seed = 1234;

  std::size_t image_height() const { return latent_height * image_downscale; }
  std::size_t image_width() const { return latent_width * image_downscale; }
  /// Stable content hash over every field.
  std::string hash() const;
};

BackendProfile toy_profile(std::uint64_t seed = 1234);
/// Shape-only profile of an SD-class latent diffusion model (downscale 8, 4-channel latents).
BackendProfile pretrained_profile();
/// Latent [channels, h, w] for an image of the given size; throws when not divisible.
Shape latent_shape_for(const BackendProfile& profile, std::size_t image_height, std::size_t image_width);

/// Reads a keyed profile file (JSON). Missing keys keep the toy defaults.
BackendProfile load_profile(const std::filesystem::path& path);
std::string profile_to_json(const BackendProfile& profile);
BackendProfile profile_from_json(const std::string& text);

/// Discrete DDIM schedule over T sampling steps: step k uses training
/// timestep k * train_steps / T and alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  NoiseSchedule(const ScheduleSpec& spec, int steps);

  int steps() const { return steps_; }
  double alpha_bar(int step) const;
  int timestep(int step) const;

 private:
  int steps_;
  int train_steps_;
  std::vector<double> cumulative_;  // index = training timestep, 0 -> 1.0
};

/// Opaque text condition. The empty prompt is the unconditional branch.
struct TextCondition {
  std::string prompt;
  static TextCondition unconditional() { return {}; }
};

struct CaptureFlags {
  bool features = false;
  bool attention = false;
  /// Probe activations outside the decoder self-attention path.
  bool probes = false;
};

struct FeatureStack {
  std::array<Tensor, kDecoderLayers> layers;
  int timestep = 0;

  /// 1-based, matching the first..fourth decoder layer naming.
  const Tensor& layer(std::size_t index) const { return layers.at(index - 1); }
};

/// Activations the self-attention override must never touch.
struct ProbeRecord {
  std::vector<Tensor> encoder;
  std::vector<AttentionSite> text_attention;
};

struct DenoiseOutput {
  Latent noise_pred;
  std::optional<FeatureStack> features;
  std::optional<AttentionRecord> attention;
  std::optional<ProbeRecord> probes;
};

/// Cotangents for decoder features, 1-based layer order in a 0-based array.
using FeatureCotangents = std::array<std::optional<Tensor>, kDecoderLayers>;

/// Denoiser abstraction. Implementations are immutable after construction;
/// capture and override state travels in arguments only.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const BackendProfile& profile() const = 0;

  /// epsilon_theta(latent, timestep | text). When `attention_override` is given,
  /// every decoder self-attention site uses its keys/values (1x or 2x tokens).
  virtual DenoiseOutput predict(const Latent& latent, int timestep, const TextCondition& text,
                                const AttentionRecord* attention_override, CaptureFlags capture) const = 0;

  /// Vector-Jacobian product: gradient w.r.t. `latent` of sum_l <cotangent_l, F_l(latent)>.
  virtual Tensor feature_vjp(const Latent& latent, int timestep, const TextCondition& text,
                             const AttentionRecord* attention_override, const FeatureCotangents& cotangents) const = 0;

  virtual Latent encode(const Image& image) const = 0;
  virtual Image decode(const Latent& latent) const = 0;

  NoiseSchedule schedule(int steps) const { return NoiseSchedule(profile().schedule, steps); }

 protected:
  void check_predict_args(const Latent& latent, int timestep, const AttentionRecord* attention_override) const;
};

/// Instantiates the backend named by `profile.name`. Only the toy reference
/// denoiser ships with this build; other profiles need an external adapter.
std::unique_ptr<Backend> make_backend(const BackendProfile& profile);

}  // namespace featguide
