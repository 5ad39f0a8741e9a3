#pragma once

#include <optional>
#include <string>
#include <vector>

#include "featguide/attention_control.hpp"
#include "featguide/edit_tasks.hpp"
#include "featguide/inversion.hpp"
#include "json.hpp"

namespace featguide {

struct TaskWeights {
  double w_edit = 1.0;
  double w_content = 1.0;
  double w_opt = 0.0;
};

/// Defaults tuned on the toy backend. They are not published values.
TaskWeights default_weights(EditKind kind);

struct GuidanceConfig {
  double alpha = 1.0;
  double beta = 4.0;
  /// Unset weights fall back to the task defaults.
  std::optional<double> w_edit;
  std::optional<double> w_content;
  std::optional<double> w_opt;
  double w_inpaint = 2.5;
  /// Learning rate. Unset: calibrated at the first gated step so that
  /// max|eta * grad| equals max|eps_hat|.
  std::optional<double> eta;
  /// Scale the guidance term by sqrt(1 - alpha_bar_t).
  bool sigma_scaling = false;
  int n_gated = 30;
  std::vector<std::size_t> layers{2, 3};
  double cfg_scale = 5.0;
  int steps = 50;
  /// Preview cadence in steps; 0 disables previews.
  int preview_every = 10;

  friend bool operator==(const GuidanceConfig&, const GuidanceConfig&) = default;
};

/// Throws SpecError naming the offending field.
void validate(const GuidanceConfig& config);
/// Task defaults, overlaid by config values, then by the spec's overrides.
/// Tasks without an inpainting term always get w_opt = 0.
TaskWeights effective_weights(const GuidanceConfig& config, const EditSpec& spec);
/// Copy of `base` with every weight filled in from effective_weights.
GuidanceConfig resolve_config(GuidanceConfig base, const EditSpec& spec);

nlohmann::json config_to_json(const GuidanceConfig& config);
/// Missing keys keep `base` values. Throws SpecError("config.<key>", ...).
GuidanceConfig config_from_json(const nlohmann::json& j, GuidanceConfig base = {});

/// A similarity value with its gradient w.r.t. F_gen (same shape as F_gen).
struct Similarity {
  double value = 0.0;
  Tensor grad;
};

/// Mean over pairs of 0.5 cos(F_gen[p], F_gud[q]) + 0.5 with F_gud sampled bilinearly.
/// F_gud is a constant. Throws ContractError on an empty pair list.
Similarity s_local(const Tensor& f_gen, const Tensor& f_gud, const std::vector<CellPair>& pairs);
/// Identity pairing over the cells of `m`.
Similarity s_local(const Tensor& f_gen, const Tensor& f_gud, const Mask& m);
/// 0.5 cos(mean F_gen over m_gen, mean F_gud over m_gud) + 0.5.
Similarity s_global(const Tensor& f_gen, const Mask& m_gen, const Tensor& f_gud, const Mask& m_gud);

/// 1 / (alpha + beta S).
double energy_edit(double s, double alpha = 1.0, double beta = 4.0);
double energy_edit_slope(double s, double alpha = 1.0, double beta = 4.0);

struct EnergyTerms {
  double e_edit = 0.0;
  double e_content = 0.0;
  double e_opt = 0.0;
};

/// w_e E_edit + w_c E_content + w_o E_opt, summed over the given per-layer terms.
double total_energy(const std::vector<EnergyTerms>& per_layer, const TaskWeights& weights);

/// Energy of one layer and its gradient w.r.t. F_gen.
struct LayerEnergy {
  std::size_t layer = 0;
  EnergyTerms terms;
  double weighted = 0.0;
  Tensor grad;
  std::vector<std::string> warnings;
};

/// Features on the guided side: F_gud always, F_ref for reference tasks.
struct GuidedFeatures {
  FeatureStack gud;
  std::optional<FeatureStack> ref;
};

/// Zero-weight terms are never evaluated; empty supports skip their term with a warning.
LayerEnergy layer_energy(const Tensor& f_gen, const GuidedFeatures& guided, const LayerMasks& masks,
                         const EditSpec& spec, const GuidanceConfig& config, bool with_grad = true);

/// Everything a guidance source sees at one sampling step.
struct GuidanceContext {
  int t = 0;
  int timestep = 0;
  const Latent* z_t = nullptr;
  const BankEntry* entry = nullptr;
  const KVPlan* plan = nullptr;
};

struct GuidanceResult {
  Tensor grad;  // latent shaped
  double energy = 0.0;
  EnergyTerms terms;  // summed over layers
  std::vector<std::string> warnings;
};

/// Produces the energy gradient the sampler adds to eps_hat.
class GuidanceSource {
 public:
  virtual ~GuidanceSource() = default;
  virtual GuidanceResult evaluate(const GuidanceContext& ctx) = 0;
};

/// Feature-correspondence energy over the configured decoder layers.
class FeatureGuidance final : public GuidanceSource {
 public:
  FeatureGuidance(const Backend& backend, EditSpec spec, GuidanceConfig config, TextCondition text);

  GuidanceResult evaluate(const GuidanceContext& ctx) override;
  /// Energy only, no backward pass.
  double energy(const Latent& z_t, int timestep, const BankEntry& entry, const KVPlan& plan) const;

  GuidedFeatures guided_features(const BankEntry& entry, int timestep) const;
  const std::array<LayerMasks, kDecoderLayers>& masks() const { return masks_; }

 private:
  const Backend& backend_;
  EditSpec spec_;
  GuidanceConfig config_;
  TextCondition text_;
  std::array<LayerMasks, kDecoderLayers> masks_;
};

/// grad_{z_t} E for one step. Guided features come from a fresh predict on the
/// stored latents and are treated as constants. Throws std::runtime_error naming
/// the offending term when the gradient is not finite.
GuidanceResult guidance_gradient(const Backend& backend, const Latent& z_t, int timestep, const BankEntry& entry,
                                 const EditSpec& spec, const GuidanceConfig& config, const TextCondition& text);

}  // namespace featguide
