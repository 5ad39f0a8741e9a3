#include "featguide/backend.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "featguide/encoding.hpp"
#include "featguide/toy_backend.hpp"

namespace featguide {

using nlohmann::json;

namespace {

const char* to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "scaled_linear"; }

ScheduleKind schedule_kind_from(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "scaled_linear") return ScheduleKind::scaled_linear;
  throw ContractError("unknown schedule kind '" + s + "'");
}

const char* to_string(FeatureSite site) { return site == FeatureSite::block_output ? "block_output" : "pre_attention"; }

FeatureSite feature_site_from(const std::string& s) {
  if (s == "block_output") return FeatureSite::block_output;
  if (s == "pre_attention") return FeatureSite::pre_attention;
  throw ContractError("unknown feature site '" + s + "'");
}

json to_json(const BackendProfile& p) {
  json layers = json::array();
  for (const LayerDims& l : p.feature_dims) layers.push_back({{"channels", l.channels}, {"scale", l.scale}});
  return json{{"v", 1},
              {"name", p.name},
              {"latent_channels", p.latent_channels},
              {"latent_size", {p.latent_height, p.latent_width}},
              {"image_downscale", p.image_downscale},
              {"decoder_layers", layers},
              {"attention_head_dim", p.attention_head_dim},
              {"schedule",
               {{"kind", to_string(p.schedule.kind)},
                {"beta_start", p.schedule.beta_start},
                {"beta_end", p.schedule.beta_end},
                {"train_steps", p.schedule.train_steps}}},
              {"steps", p.steps},
              {"feature_site", to_string(p.feature_site)},
              {"seed", p.seed}};
}

}  // namespace

std::string BackendProfile::hash() const { return sha256_hex(to_json(*this).dump()).substr(0, 16); }

BackendProfile toy_profile(std::uint64_t seed) {
  BackendProfile p;
  p.name = "toy";
  p.feature_dims = {LayerDims{16, 8}, LayerDims{16, 4}, LayerDims{16, 2}, LayerDims{16, 1}};
  p.seed = seed;
  return p;
}

BackendProfile pretrained_profile() {
  BackendProfile p;
  p.name = "sd15";
  p.latent_channels = 4;
  p.latent_height = 64;
  p.latent_width = 64;
  p.image_downscale = 8;
  p.feature_dims = {LayerDims{1280, 64}, LayerDims{1280, 32}, LayerDims{640, 16}, LayerDims{320, 8}};
  p.attention_head_dim = 40;
  return p;
}

Shape latent_shape_for(const BackendProfile& profile, std::size_t image_height, std::size_t image_width) {
  const std::size_t f = profile.image_downscale;
  if (image_height % f != 0 || image_width % f != 0) {
    throw ContractError("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                        " is not divisible by the backend downscale " + std::to_string(f));
  }
  return {profile.latent_channels, image_height / f, image_width / f};
}

std::string profile_to_json(const BackendProfile& profile) { return to_json(profile).dump(2); }

BackendProfile profile_from_json(const std::string& text) {
  const json j = json::parse(text);
  BackendProfile p = j.value("name", std::string("toy")) == "toy" ? toy_profile() : pretrained_profile();
  p.name = j.value("name", p.name);
  p.latent_channels = j.value("latent_channels", p.latent_channels);
  if (j.contains("latent_size")) {
    p.latent_height = j.at("latent_size").at(0).get<std::size_t>();
    p.latent_width = j.at("latent_size").at(1).get<std::size_t>();
  }
  p.image_downscale = j.value("image_downscale", p.image_downscale);
  if (j.contains("decoder_layers")) {
    const json& layers = j.at("decoder_layers");
    if (layers.size() != kDecoderLayers) throw ContractError("profile: decoder_layers must list exactly 4 layers");
    for (std::size_t i = 0; i < kDecoderLayers; ++i) {
      p.feature_dims[i].channels = layers[i].at("channels").get<std::size_t>();
      p.feature_dims[i].scale = layers[i].at("scale").get<std::size_t>();
    }
  }
  p.attention_head_dim = j.value("attention_head_dim", p.attention_head_dim);
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    p.schedule.kind = schedule_kind_from(s.value("kind", std::string(to_string(p.schedule.kind))));
    p.schedule.beta_start = s.value("beta_start", p.schedule.beta_start);
    p.schedule.beta_end = s.value("beta_end", p.schedule.beta_end);
    p.schedule.train_steps = s.value("train_steps", p.schedule.train_steps);
  }
  p.steps = j.value("steps", p.steps);
  p.feature_site = feature_site_from(j.value("feature_site", std::string(to_string(p.feature_site))));
  p.seed = j.value("seed", p.seed);
  for (std::size_t i = 1; i < kDecoderLayers; ++i) {
    if (p.feature_dims[i].scale >= p.feature_dims[i - 1].scale) {
      throw ContractError("profile: decoder feature resolution must strictly increase from layer 1 to 4");
    }
  }
  return p;
}

BackendProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open profile " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return profile_from_json(ss.str());
}

NoiseSchedule::NoiseSchedule(const ScheduleSpec& spec, int steps) : steps_(steps), train_steps_(spec.train_steps) {
  if (spec.train_steps < 2) throw ContractError("schedule: train_steps must be at least 2");
  if (steps < 1 || steps > spec.train_steps) {
    throw ContractError("schedule: steps must lie in [1, " + std::to_string(spec.train_steps) + "]");
  }
  cumulative_.resize(static_cast<std::size_t>(train_steps_) + 1);
  cumulative_[0] = 1.0;
  const double n = static_cast<double>(train_steps_ - 1);
  for (int i = 1; i <= train_steps_; ++i) {
    const double frac = static_cast<double>(i - 1) / n;
    double beta = 0.0;
    if (spec.kind == ScheduleKind::linear) {
      beta = spec.beta_start + (spec.beta_end - spec.beta_start) * frac;
    } else {
      const double r = std::sqrt(spec.beta_start) + (std::sqrt(spec.beta_end) - std::sqrt(spec.beta_start)) * frac;
      beta = r * r;
    }
    cumulative_[static_cast<std::size_t>(i)] = cumulative_[static_cast<std::size_t>(i - 1)] * (1.0 - beta);
  }
}

int NoiseSchedule::timestep(int step) const {
  if (step < 0 || step > steps_) {
    throw ContractError("schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(steps_) + "]");
  }
  return static_cast<int>(static_cast<long long>(step) * train_steps_ / steps_);
}

double NoiseSchedule::alpha_bar(int step) const { return cumulative_[static_cast<std::size_t>(timestep(step))]; }

void Backend::check_predict_args(const Latent& latent, int timestep, const AttentionRecord* attention_override) const {
  const BackendProfile& p = profile();
  const Shape expected{p.latent_channels, p.latent_height, p.latent_width};
  if (latent.data.shape() != expected) {
    throw ContractError("predict: latent shape " + shape_string(latent.data.shape()) + " does not match profile " +
                        shape_string(expected));
  }
  if (!latent.data.all_finite()) throw ContractError("predict: latent contains non-finite values");
  if (timestep < 0 || timestep > p.schedule.train_steps) {
    throw ContractError("predict: timestep " + std::to_string(timestep) + " outside [0, " +
                        std::to_string(p.schedule.train_steps) + "]");
  }
  if (!attention_override) return;
  if (attention_override->sites.size() != kDecoderLayers) {
    throw ContractError("predict: attention override must cover all 4 decoder sites");
  }
  for (std::size_t l = 0; l < kDecoderLayers; ++l) {
    const AttentionSite& site = attention_override->sites[l];
    const LayerDims& dims = p.feature_dims[l];
    const std::size_t tokens = (p.image_height() / dims.scale) * (p.image_width() / dims.scale);
    const std::size_t heads = dims.channels / p.attention_head_dim;
    if (site.keys.rank() != 3 || site.keys.shape() != site.values.shape()) {
      throw ContractError("predict: override site " + std::to_string(l + 1) + " has mismatched keys/values");
    }
    if (site.heads() != heads || site.head_dim() != p.attention_head_dim) {
      throw ContractError("predict: override site " + std::to_string(l + 1) + " head layout " +
                          shape_string(site.keys.shape()) + " incompatible with profile");
    }
    if (site.tokens() != tokens && site.tokens() != 2 * tokens) {
      throw ContractError("predict: override site " + std::to_string(l + 1) + " has " +
                          std::to_string(site.tokens()) + " tokens; expected " + std::to_string(tokens) + " or " +
                          std::to_string(2 * tokens));
    }
  }
}

std::unique_ptr<Backend> make_backend(const BackendProfile& profile) {
  if (profile.name == "toy") return std::make_unique<ToyBackend>(profile);
  throw ContractError("backend profile '" + profile.name +
                      "' requires a pretrained adapter, which is not bundled with this build");
}

}  // namespace featguide
