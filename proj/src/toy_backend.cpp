#include "featguide/toy_backend.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace featguide {

namespace {

constexpr std::size_t kTimeEmbed = 16;
constexpr std::size_t kTextTokens = 4;
constexpr std::size_t kTextEmbed = 16;
constexpr double kNoiseGain = 0.5;

// Orthonormal-column RGB -> 4-channel map; decode uses the transpose.
constexpr double kCodec[4][3] = {
    {0.5, 0.5, 0.5},
    {0.5, -0.5, 0.5},
    {0.5, 0.5, -0.5},
    {0.5, -0.5, -0.5},
};

class WeightSource {
 public:
  explicit WeightSource(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = stddev * dist_(rng_);
    return t;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

ToyBackend::ToyBackend(BackendProfile profile) : profile_(std::move(profile)) {
  const BackendProfile& p = profile_;
  channels_ = p.feature_dims[0].channels;
  for (std::size_t l = 0; l < kDecoderLayers; ++l) {
    if (p.feature_dims[l].channels != channels_) throw ContractError("toy backend: all decoder layers need equal width");
    if (p.feature_dims[l].scale != p.image_downscale << (kDecoderLayers - 1 - l)) {
      throw ContractError("toy backend: decoder layer " + std::to_string(l + 1) + " scale inconsistent with downscale");
    }
  }
  if (p.latent_channels != 4) throw ContractError("toy backend: latent must have 4 channels");
  if (p.latent_height % 8 || p.latent_width % 8) throw ContractError("toy backend: latent size must be divisible by 8");
  if (channels_ % p.attention_head_dim) throw ContractError("toy backend: width not divisible by head dim");
  heads_ = channels_ / p.attention_head_dim;

  WeightSource w(p.seed);
  const std::size_t c = channels_;
  const auto conv = [&](std::size_t out, std::size_t in, double gain) {
    return Conv{w.normal({out, in, 3, 3}, gain / std::sqrt(9.0 * static_cast<double>(in))), w.normal({out}, 0.1)};
  };
  const auto dense = [&](std::size_t out, std::size_t in, double gain) {
    return w.normal({out, in}, gain / std::sqrt(static_cast<double>(in)));
  };

  conv_in_ = conv(c, p.latent_channels, 1.5);
  time_in_ = dense(c, kTimeEmbed, 0.5);
  for (std::size_t i = 0; i < 3; ++i) {
    down_[i] = conv(c, c, 1.5);
    time_down_[i] = dense(c, kTimeEmbed, 0.5);
  }
  mid_ = conv(c, c, 1.5);
  time_mid_ = dense(c, kTimeEmbed, 0.5);
  for (DecoderBlock& block : decoder_) {
    block.conv = conv(c, 2 * c, 1.5);
    block.time_proj = dense(c, kTimeEmbed, 0.5);
    block.q = dense(c, c, 1.5);
    block.k = dense(c, c, 1.5);
    block.v = dense(c, c, 1.0);
    block.o = dense(c, c, 0.8);
    block.text_q = dense(c, c, 1.0);
    block.text_k = dense(c, kTextEmbed, 1.0);
    block.text_v = dense(c, kTextEmbed, 1.0);
    block.text_o = dense(c, c, 0.5);
  }
  conv_out_ = conv(p.latent_channels, c, 1.0);
}

std::vector<double> ToyBackend::time_bias(const Tensor& proj, int timestep) const {
  // Low-frequency sinusoids over the training range keep epsilon smooth in t.
  std::array<double, kTimeEmbed> embed{};
  const double phase = std::numbers::pi * timestep / profile_.schedule.train_steps;
  for (std::size_t i = 0; i < kTimeEmbed / 2; ++i) {
    embed[2 * i] = std::sin(phase * static_cast<double>(i + 1) * 0.5);
    embed[2 * i + 1] = std::cos(phase * static_cast<double>(i + 1) * 0.5);
  }
  std::vector<double> bias(proj.dim(0), 0.0);
  for (std::size_t o = 0; o < bias.size(); ++o)
    for (std::size_t k = 0; k < kTimeEmbed; ++k) bias[o] += proj[o * kTimeEmbed + k] * embed[k];
  return bias;
}

Tensor ToyBackend::text_tokens(const TextCondition& text) const {
  std::mt19937_64 rng(fnv1a(text.prompt, profile_.seed));
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor tokens({kTextTokens, kTextEmbed});
  for (double& v : tokens.values()) v = dist(rng);
  return tokens;
}

ToyBackend::Pass ToyBackend::forward(ad::Tape& tape, ad::Var latent, int timestep, const TextCondition& text,
                                     const AttentionRecord* attention_override) const {
  using namespace ad;
  Pass pass;
  const auto block = [&](Var x, const Conv& conv, const Tensor& time_proj) {
    return silu(add_channel_bias(conv3x3(x, conv.weight, conv.bias), time_bias(time_proj, timestep)));
  };

  std::array<Var, 4> skips;
  skips[0] = block(latent, conv_in_, time_in_);
  for (std::size_t i = 0; i < 3; ++i) skips[i + 1] = block(avg_pool2(skips[i]), down_[i], time_down_[i]);
  for (Var s : skips) pass.probes.encoder.push_back(tape.value(s));

  const Tensor tokens = text_tokens(text);
  Var h = block(skips[3], mid_, time_mid_);
  for (std::size_t l = 0; l < kDecoderLayers; ++l) {
    const DecoderBlock& blk = decoder_[l];
    if (l > 0) h = upsample_nearest2(h);
    h = block(concat_channels(h, skips[3 - l]), blk.conv, blk.time_proj);
    const std::size_t height = tape.value(h).dim(1), width = tape.value(h).dim(2);
    const Var pre_attention = h;

    Var q = project_heads(h, blk.q, heads_);
    Var k = project_heads(h, blk.k, heads_);
    Var v = project_heads(h, blk.v, heads_);
    pass.attention.sites.push_back(AttentionSite{tape.value(k), tape.value(v)});
    if (attention_override) {
      k = tape.constant(attention_override->sites[l].keys);
      v = tape.constant(attention_override->sites[l].values);
    }
    h = add(h, merge_heads(attention(q, k, v), blk.o, height, width));

    Var tq = project_heads(h, blk.text_q, heads_);
    Tensor tk = project_tokens(tokens, blk.text_k, heads_);
    Tensor tv = project_tokens(tokens, blk.text_v, heads_);
    pass.probes.text_attention.push_back(AttentionSite{tk, tv});
    h = add(h, merge_heads(attention(tq, tape.constant(std::move(tk)), tape.constant(std::move(tv))), blk.text_o,
                           height, width));

    pass.features[l] = profile_.feature_site == FeatureSite::block_output ? h : pre_attention;
  }
  pass.noise = scale(conv3x3(h, conv_out_.weight, conv_out_.bias), kNoiseGain);
  return pass;
}

DenoiseOutput ToyBackend::predict(const Latent& latent, int timestep, const TextCondition& text,
                                  const AttentionRecord* attention_override, CaptureFlags capture) const {
  check_predict_args(latent, timestep, attention_override);
  ad::Tape tape;
  Pass pass = forward(tape, tape.constant(latent.data), timestep, text, attention_override);

  DenoiseOutput out;
  out.noise_pred = Latent{tape.value(pass.noise), SpaceTag::latent};
  if (capture.features) {
    FeatureStack stack;
    stack.timestep = timestep;
    for (std::size_t l = 0; l < kDecoderLayers; ++l) stack.layers[l] = tape.value(pass.features[l]);
    out.features = std::move(stack);
  }
  if (capture.attention) out.attention = std::move(pass.attention);
  if (capture.probes) out.probes = std::move(pass.probes);
  return out;
}

Tensor ToyBackend::feature_vjp(const Latent& latent, int timestep, const TextCondition& text,
                               const AttentionRecord* attention_override,
                               const FeatureCotangents& cotangents) const {
  check_predict_args(latent, timestep, attention_override);
  ad::Tape tape;
  const ad::Var input = tape.input(latent.data);
  Pass pass = forward(tape, input, timestep, text, attention_override);
  std::vector<ad::Tape::Seed> seeds;
  for (std::size_t l = 0; l < kDecoderLayers; ++l) {
    if (cotangents[l]) seeds.push_back({pass.features[l], &*cotangents[l]});
  }
  tape.backward(seeds);
  return tape.grad(input);
}

Tensor ToyBackend::noise_vjp(const Latent& latent, int timestep, const TextCondition& text,
                             const AttentionRecord* attention_override, const Tensor& cotangent) const {
  check_predict_args(latent, timestep, attention_override);
  require_same_shape(latent.data, cotangent, "noise cotangent");
  ad::Tape tape;
  const ad::Var input = tape.input(latent.data);
  Pass pass = forward(tape, input, timestep, text, attention_override);
  const ad::Tape::Seed seed{pass.noise, &cotangent};
  tape.backward(std::span<const ad::Tape::Seed>(&seed, 1));
  return tape.grad(input);
}

Latent ToyBackend::encode(const Image& image) const {
  const Shape shape = latent_shape_for(profile_, image.height, image.width);
  if (shape[1] != profile_.latent_height || shape[2] != profile_.latent_width) {
    throw ContractError("encode: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                        " does not match the backend resolution");
  }
  if (image.rgb.size() != 3 * image.width * image.height) throw ContractError("encode: pixel buffer size mismatch");
  const std::size_t f = profile_.image_downscale;
  Latent out{Tensor(shape), SpaceTag::latent};
  for (std::size_t y = 0; y < shape[1]; ++y) {
    for (std::size_t x = 0; x < shape[2]; ++x) {
      // box-average the f x f footprint; exact when f == 1
      std::array<double, 3> rgb{};
      for (std::size_t dy = 0; dy < f; ++dy)
        for (std::size_t dx = 0; dx < f; ++dx)
          for (std::size_t k = 0; k < 3; ++k)
            rgb[k] += image.rgb[3 * ((y * f + dy) * image.width + x * f + dx) + k] / 127.5 - 1.0;
      for (double& v : rgb) v /= static_cast<double>(f * f);
      for (std::size_t c = 0; c < 4; ++c)
        out.data.at(c, y, x) = kCodec[c][0] * rgb[0] + kCodec[c][1] * rgb[1] + kCodec[c][2] * rgb[2];
    }
  }
  return out;
}

Image ToyBackend::decode(const Latent& latent) const {
  const std::size_t f = profile_.image_downscale;
  const std::size_t h = latent.height(), w = latent.width();
  Image img{w * f, h * f, std::vector<std::uint8_t>(3 * w * f * h * f)};
  for (std::size_t y = 0; y < h * f; ++y) {
    for (std::size_t x = 0; x < w * f; ++x) {
      for (std::size_t k = 0; k < 3; ++k) {
        double v = 0.0;
        for (std::size_t c = 0; c < 4; ++c) v += kCodec[c][k] * latent.data.at(c, y / f, x / f);
        const double level = std::round((v + 1.0) * 127.5);
        img.rgb[3 * (y * img.width + x) + k] = static_cast<std::uint8_t>(std::clamp(level, 0.0, 255.0));
      }
    }
  }
  return img;
}

}  // namespace featguide
