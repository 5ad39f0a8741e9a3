#pragma once

#include <array>

#include "featguide/autodiff.hpp"
#include "featguide/backend.hpp"

namespace featguide {

/// Deterministic reference denoiser: a 4-scale encoder-decoder with one
/// self-attention site and one text cross-attention site per decoder block.
/// Weights are drawn from the profile seed. The image codec is an exact
/// orthonormal RGB <-> latent map, so encode/decode round-trips 8-bit images.
class ToyBackend final : public Backend {
 public:
  explicit ToyBackend(BackendProfile profile);

  const BackendProfile& profile() const override { return profile_; }

  DenoiseOutput predict(const Latent& latent, int timestep, const TextCondition& text,
                        const AttentionRecord* attention_override, CaptureFlags capture) const override;

  Tensor feature_vjp(const Latent& latent, int timestep, const TextCondition& text,
                     const AttentionRecord* attention_override, const FeatureCotangents& cotangents) const override;

  /// Gradient w.r.t. `latent` of <cotangent, noise_pred(latent)>.
  Tensor noise_vjp(const Latent& latent, int timestep, const TextCondition& text,
                   const AttentionRecord* attention_override, const Tensor& cotangent) const;

  Latent encode(const Image& image) const override;
  Image decode(const Latent& latent) const override;

  /// Text token matrix [tokens, embed] the toy derives from a prompt.
  Tensor text_tokens(const TextCondition& text) const;

 private:
  struct Conv {
    Tensor weight;  // [out, in, 3, 3]
    Tensor bias;    // [out]
  };
  struct DecoderBlock {
    Conv conv;
    Tensor time_proj;  // [C, embed]
    Tensor q, k, v, o;
    Tensor text_q, text_k, text_v, text_o;
  };
  struct Pass {
    ad::Var noise;
    std::array<ad::Var, kDecoderLayers> features;
    AttentionRecord attention;
    ProbeRecord probes;
  };

  Pass forward(ad::Tape& tape, ad::Var latent, int timestep, const TextCondition& text,
               const AttentionRecord* attention_override) const;
  std::vector<double> time_bias(const Tensor& proj, int timestep) const;

  BackendProfile profile_;
  std::size_t channels_;
  std::size_t heads_;
  Conv conv_in_;
  Tensor time_in_;
  std::array<Conv, 3> down_;
  std::array<Tensor, 3> time_down_;
  Conv mid_;
  Tensor time_mid_;
  std::array<DecoderBlock, kDecoderLayers> decoder_;
  Conv conv_out_;
};

}  // namespace featguide
