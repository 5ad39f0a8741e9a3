#include "featguide/guidance.hpp"

#include <cmath>
#include <stdexcept>

namespace featguide {

TaskWeights default_weights(EditKind kind) {
  switch (kind) {
    case EditKind::moving:
    case EditKind::resizing: return {4.0, 6.0, 1.0};
    case EditKind::replacing:
    case EditKind::pasting:
    case EditKind::dragging: return {4.0, 6.0, 0.0};
  }
  return {};
}

void validate(const GuidanceConfig& c) {
  auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
  auto nonneg = [](const std::optional<double>& v) { return !v || (std::isfinite(*v) && *v >= 0.0); };
  if (!positive(c.alpha)) throw SpecError("config.alpha", "must be > 0");
  if (!positive(c.beta)) throw SpecError("config.beta", "must be > 0");
  if (!nonneg(c.w_edit)) throw SpecError("config.w_e", "must be >= 0");
  if (!nonneg(c.w_content)) throw SpecError("config.w_c", "must be >= 0");
  if (!nonneg(c.w_opt)) throw SpecError("config.w_o", "must be >= 0");
  if (!(std::isfinite(c.w_inpaint) && c.w_inpaint >= 0.0)) throw SpecError("config.w_i", "must be >= 0");
  if (c.eta && !std::isfinite(*c.eta)) throw SpecError("config.eta", "must be finite");
  if (c.steps < 1) throw SpecError("config.steps", "must be >= 1");
  if (c.n_gated < 0 || c.n_gated > c.steps) throw SpecError("config.n_gated", "must lie in [0, steps]");
  if (!(std::isfinite(c.cfg_scale) && c.cfg_scale >= 1.0)) throw SpecError("config.cfg_scale", "must be >= 1");
  if (c.preview_every < 0) throw SpecError("config.preview_every", "must be >= 0");
  for (std::size_t l : c.layers) {
    if (l < 1 || l > kDecoderLayers) throw SpecError("config.layers", "layers must lie in 1..4");
  }
}

TaskWeights effective_weights(const GuidanceConfig& config, const EditSpec& spec) {
  TaskWeights w = default_weights(spec.kind);
  if (config.w_edit) w.w_edit = *config.w_edit;
  if (config.w_content) w.w_content = *config.w_content;
  if (config.w_opt) w.w_opt = *config.w_opt;
  if (spec.weights.w_edit) w.w_edit = *spec.weights.w_edit;
  if (spec.weights.w_content) w.w_content = *spec.weights.w_content;
  if (spec.weights.w_opt) w.w_opt = *spec.weights.w_opt;
  if (!spec.has_opt_term()) w.w_opt = 0.0;
  return w;
}

GuidanceConfig resolve_config(GuidanceConfig base, const EditSpec& spec) {
  const TaskWeights w = effective_weights(base, spec);
  base.w_edit = w.w_edit;
  base.w_content = w.w_content;
  base.w_opt = w.w_opt;
  if (spec.weights.w_inpaint) base.w_inpaint = *spec.weights.w_inpaint;
  return base;
}

nlohmann::json config_to_json(const GuidanceConfig& c) {
  nlohmann::json j;
  j["v"] = 1;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  if (c.w_edit) j["w_e"] = *c.w_edit;
  if (c.w_content) j["w_c"] = *c.w_content;
  if (c.w_opt) j["w_o"] = *c.w_opt;
  j["w_i"] = c.w_inpaint;
  if (c.eta) j["eta"] = *c.eta;
  j["sigma_scaling"] = c.sigma_scaling;
  j["n_gated"] = c.n_gated;
  j["layers"] = c.layers;
  j["cfg_scale"] = c.cfg_scale;
  j["steps"] = c.steps;
  j["preview_every"] = c.preview_every;
  return j;
}

GuidanceConfig config_from_json(const nlohmann::json& j, GuidanceConfig c) {
  if (j.is_null()) return c;
  if (!j.is_object()) throw SpecError("config", "expected an object");
  auto number = [&](const char* key, auto& slot) {
    if (!j.contains(key) || j[key].is_null()) return;
    if (!j[key].is_number()) throw SpecError(std::string("config.") + key, "expected a number");
    slot = j[key].get<double>();
  };
  auto integer = [&](const char* key, int& slot) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer()) throw SpecError(std::string("config.") + key, "expected an integer");
    slot = j[key].get<int>();
  };
  number("alpha", c.alpha);
  number("beta", c.beta);
  number("w_e", c.w_edit);
  number("w_c", c.w_content);
  number("w_o", c.w_opt);
  number("w_i", c.w_inpaint);
  number("eta", c.eta);
  number("cfg_scale", c.cfg_scale);
  integer("n_gated", c.n_gated);
  integer("steps", c.steps);
  integer("preview_every", c.preview_every);
  if (j.contains("sigma_scaling")) {
    if (!j["sigma_scaling"].is_boolean()) throw SpecError("config.sigma_scaling", "expected a boolean");
    c.sigma_scaling = j["sigma_scaling"].get<bool>();
  }
  if (j.contains("layers")) {
    const auto& arr = j["layers"];
    if (!arr.is_array() || arr.empty()) throw SpecError("config.layers", "expected a non-empty array");
    c.layers.clear();
    for (const auto& v : arr) {
      if (!v.is_number_integer()) throw SpecError("config.layers", "expected integers");
      const long l = v.get<long>();
      if (l < 1 || l > static_cast<long>(kDecoderLayers)) throw SpecError("config.layers", "layers must lie in 1..4");
      c.layers.push_back(static_cast<std::size_t>(l));
    }
  }
  validate(c);
  return c;
}

// ---- similarities ----

namespace {

constexpr double kTinyNorm = 1e-12;

/// Adds d(0.5 cos(a, b) + 0.5)/da * scale into grad_a; returns cos.
double cosine_with_grad(std::span<const double> a, std::span<const double> b, double scale, double* grad_a) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na < kTinyNorm || nb < kTinyNorm) return 0.0;
  const double cos = ab / (na * nb);
  if (grad_a) {
    for (std::size_t k = 0; k < a.size(); ++k) {
      grad_a[k] += scale * 0.5 * (b[k] / (na * nb) - cos * a[k] / aa);
    }
  }
  return cos;
}

void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw ContractError(std::string(what) + " must be [C, H, W]");
}

std::vector<double> channel_vector(const Tensor& f, std::size_t y, std::size_t x) {
  std::vector<double> v(f.dim(0));
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = f.at(c, y, x);
  return v;
}

void require_mask_grid(const Tensor& f, const Mask& m, const char* what) {
  if (m.height() != f.dim(1) || m.width() != f.dim(2)) {
    throw ContractError(std::string(what) + " does not match the feature resolution");
  }
}

}  // namespace

Similarity s_local(const Tensor& f_gen, const Tensor& f_gud, const std::vector<CellPair>& pairs) {
  require_chw(f_gen, "F_gen");
  require_chw(f_gud, "F_gud");
  if (f_gen.dim(0) != f_gud.dim(0)) throw ContractError("F_gen and F_gud channel counts differ");
  if (pairs.empty()) throw ContractError("local similarity on an empty support");
  const std::size_t c = f_gen.dim(0);
  const std::size_t hw = f_gen.dim(1) * f_gen.dim(2);
  Similarity s{0.0, Tensor(f_gen.shape())};
  const double weight = 1.0 / static_cast<double>(pairs.size());
  std::vector<double> b(c), grad(c);
  for (const CellPair& p : pairs) {
    if (p.gen_y >= f_gen.dim(1) || p.gen_x >= f_gen.dim(2)) throw ContractError("pair outside F_gen");
    bilinear_sample(f_gud, p.gud_y, p.gud_x, b);
    const std::vector<double> a = channel_vector(f_gen, p.gen_y, p.gen_x);
    std::fill(grad.begin(), grad.end(), 0.0);
    const double cos = cosine_with_grad(a, b, weight, grad.data());
    s.value += weight * (0.5 * cos + 0.5);
    const std::size_t base = p.gen_y * f_gen.dim(2) + p.gen_x;
    for (std::size_t k = 0; k < c; ++k) s.grad[k * hw + base] += grad[k];
  }
  return s;
}

Similarity s_local(const Tensor& f_gen, const Tensor& f_gud, const Mask& m) {
  require_chw(f_gen, "F_gen");
  require_mask_grid(f_gen, m, "mask");
  std::vector<CellPair> pairs;
  for (std::size_t y = 0; y < m.height(); ++y) {
    for (std::size_t x = 0; x < m.width(); ++x) {
      if (m.at(y, x)) pairs.push_back({y, x, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5});
    }
  }
  return s_local(f_gen, f_gud, pairs);
}

Similarity s_global(const Tensor& f_gen, const Mask& m_gen, const Tensor& f_gud, const Mask& m_gud) {
  require_chw(f_gen, "F_gen");
  require_chw(f_gud, "F_gud");
  require_mask_grid(f_gen, m_gen, "m_gen");
  require_mask_grid(f_gud, m_gud, "m_gud");
  if (f_gen.dim(0) != f_gud.dim(0)) throw ContractError("F_gen and F_gud channel counts differ");
  if (m_gen.none() || m_gud.none()) throw ContractError("global similarity on an empty support");
  const std::size_t c = f_gen.dim(0);
  auto region_mean = [c](const Tensor& f, const Mask& m) {
    std::vector<double> mu(c, 0.0);
    for (std::size_t y = 0; y < m.height(); ++y) {
      for (std::size_t x = 0; x < m.width(); ++x) {
        if (!m.at(y, x)) continue;
        for (std::size_t k = 0; k < c; ++k) mu[k] += f.at(k, y, x);
      }
    }
    for (double& v : mu) v /= static_cast<double>(m.count());
    return mu;
  };
  const std::vector<double> mu_gen = region_mean(f_gen, m_gen);
  const std::vector<double> mu_gud = region_mean(f_gud, m_gud);
  std::vector<double> dmu(c, 0.0);
  const double cos = cosine_with_grad(mu_gen, mu_gud, 1.0, dmu.data());
  Similarity s{0.5 * cos + 0.5, Tensor(f_gen.shape())};
  const double inv = 1.0 / static_cast<double>(m_gen.count());
  for (std::size_t y = 0; y < m_gen.height(); ++y) {
    for (std::size_t x = 0; x < m_gen.width(); ++x) {
      if (!m_gen.at(y, x)) continue;
      for (std::size_t k = 0; k < c; ++k) s.grad.at(k, y, x) = dmu[k] * inv;
    }
  }
  return s;
}

double energy_edit(double s, double alpha, double beta) { return 1.0 / (alpha + beta * s); }

double energy_edit_slope(double s, double alpha, double beta) {
  const double d = alpha + beta * s;
  return -beta / (d * d);
}

double total_energy(const std::vector<EnergyTerms>& per_layer, const TaskWeights& w) {
  double total = 0.0;
  for (const EnergyTerms& t : per_layer) {
    if (w.w_edit != 0.0) total += w.w_edit * t.e_edit;
    if (w.w_content != 0.0) total += w.w_content * t.e_content;
    if (w.w_opt != 0.0) total += w.w_opt * t.e_opt;
  }
  return total;
}

LayerEnergy layer_energy(const Tensor& f_gen, const GuidedFeatures& guided, const LayerMasks& masks,
                         const EditSpec& spec, const GuidanceConfig& config, bool with_grad) {
  const TaskWeights w = effective_weights(config, spec);
  LayerEnergy out;
  out.layer = masks.layer;
  if (with_grad) out.grad = Tensor(f_gen.shape());
  const std::string tag = "layer " + std::to_string(masks.layer) + ": ";
  const Tensor& f_gud = guided.gud.layer(masks.layer);
  auto accumulate = [&](const Similarity& s, double factor) {
    if (!with_grad || factor == 0.0) return;
    const double* g = s.grad.data();
    double* o = out.grad.data();
    for (std::size_t i = 0; i < out.grad.size(); ++i) o[i] += factor * g[i];
  };

  if (w.w_edit != 0.0) {
    // replacing and pasting compare against the reference image's features
    const Tensor& f_src = needs_reference(spec.kind) ? guided.ref.value().layer(masks.layer) : f_gud;
    std::optional<Similarity> s;
    if (spec.similarity == SimilarityMode::global) {
      if (masks.gen.none() || masks.gud.none()) {
        out.warnings.push_back(tag + "edit term skipped, empty m_gen or m_gud");
      } else {
        s = s_global(f_gen, masks.gen, f_src, masks.gud);
      }
    } else if (masks.pairs.empty()) {
      out.warnings.push_back(tag + "edit term skipped, no paired cells");
    } else {
      s = s_local(f_gen, f_src, masks.pairs);
    }
    if (s) {
      out.terms.e_edit = energy_edit(s->value, config.alpha, config.beta);
      out.weighted += w.w_edit * out.terms.e_edit;
      accumulate(*s, w.w_edit * energy_edit_slope(s->value, config.alpha, config.beta));
    }
  }

  if (w.w_content != 0.0) {
    if (masks.share.none()) {
      out.warnings.push_back(tag + "content term skipped, empty m_share");
    } else {
      const Similarity s = s_local(f_gen, f_gud, masks.share);
      out.terms.e_content = energy_edit(s.value, config.alpha, config.beta);
      out.weighted += w.w_content * out.terms.e_content;
      accumulate(s, w.w_content * energy_edit_slope(s.value, config.alpha, config.beta));
    }
  }

  if (w.w_opt != 0.0 && spec.has_opt_term()) {
    if (masks.ipt.none()) {
      // nothing uncovered, nothing to inpaint
    } else {
      if (masks.ref.none()) {
        out.warnings.push_back(tag + "inpainting pull skipped, empty m_ref");
      } else {
        const Similarity g = s_global(f_gen, masks.ipt, f_gud, masks.ref);
        out.terms.e_opt += config.w_inpaint * energy_edit(g.value, config.alpha, config.beta);
        accumulate(g, w.w_opt * config.w_inpaint * energy_edit_slope(g.value, config.alpha, config.beta));
      }
      const Similarity l = s_local(f_gen, f_gud, masks.ipt);
      out.terms.e_opt += l.value;
      accumulate(l, w.w_opt);
      out.weighted += w.w_opt * out.terms.e_opt;
    }
  }
  return out;
}

// ---- latent gradient ----

FeatureGuidance::FeatureGuidance(const Backend& backend, EditSpec spec, GuidanceConfig config, TextCondition text)
    : backend_(backend),
      spec_(std::move(spec)),
      config_(std::move(config)),
      text_(std::move(text)),
      masks_(downsample_masks(spec_, backend.profile())) {
  validate(config_);
}

GuidedFeatures FeatureGuidance::guided_features(const BankEntry& entry, int timestep) const {
  // entry K/V were captured from exactly this call, so self-substitution is a no-op
  GuidedFeatures g;
  g.gud = backend_.predict(entry.z_gud, timestep, text_, nullptr, {.features = true}).features.value();
  if (needs_reference(spec_.kind)) {
    if (!entry.z_ref) throw ContractError(std::string(to_string(spec_.kind)) + " needs a reference latent in the bank");
    g.ref = backend_.predict(*entry.z_ref, timestep, text_, nullptr, {.features = true}).features.value();
  }
  return g;
}

double FeatureGuidance::energy(const Latent& z_t, int timestep, const BankEntry& entry, const KVPlan& plan) const {
  const GuidedFeatures guided = guided_features(entry, timestep);
  const FeatureStack gen =
      backend_.predict(z_t, timestep, text_, &plan.record, {.features = true}).features.value();
  double e = 0.0;
  for (std::size_t l : config_.layers) {
    e += layer_energy(gen.layer(l), guided, masks_[l - 1], spec_, config_, false).weighted;
  }
  return e;
}

GuidanceResult FeatureGuidance::evaluate(const GuidanceContext& ctx) {
  if (!ctx.z_t || !ctx.entry || !ctx.plan) throw ContractError("guidance context is incomplete");
  const GuidedFeatures guided = guided_features(*ctx.entry, ctx.timestep);
  const FeatureStack gen =
      backend_.predict(*ctx.z_t, ctx.timestep, text_, &ctx.plan->record, {.features = true}).features.value();
  GuidanceResult result;
  FeatureCotangents cot;
  for (std::size_t l : config_.layers) {
    LayerEnergy le = layer_energy(gen.layer(l), guided, masks_[l - 1], spec_, config_, true);
    for (const char* term : {"E_edit", "E_content", "E_opt"}) {
      const double v = term[2] == 'e' ? le.terms.e_edit : term[2] == 'c' ? le.terms.e_content : le.terms.e_opt;
      if (!std::isfinite(v)) {
        throw std::runtime_error("step " + std::to_string(ctx.t) + ": layer " + std::to_string(l) + " " + term +
                                 " is not finite");
      }
    }
    if (!le.grad.all_finite()) {
      throw std::runtime_error("step " + std::to_string(ctx.t) + ": layer " + std::to_string(l) +
                               " feature gradient is not finite");
    }
    result.energy += le.weighted;
    result.terms.e_edit += le.terms.e_edit;
    result.terms.e_content += le.terms.e_content;
    result.terms.e_opt += le.terms.e_opt;
    for (auto& w : le.warnings) result.warnings.push_back(std::move(w));
    if (cot[l - 1]) {
      *cot[l - 1] += le.grad;
    } else {
      cot[l - 1] = std::move(le.grad);
    }
  }
  result.grad = backend_.feature_vjp(*ctx.z_t, ctx.timestep, text_, &ctx.plan->record, cot);
  if (!result.grad.all_finite()) {
    throw std::runtime_error("step " + std::to_string(ctx.t) + ": latent gradient is not finite (backward pass)");
  }
  return result;
}

GuidanceResult guidance_gradient(const Backend& backend, const Latent& z_t, int timestep, const BankEntry& entry,
                                 const EditSpec& spec, const GuidanceConfig& config, const TextCondition& text) {
  FeatureGuidance source(backend, spec, config, text);
  const KVPlan plan = build_kv_plan(entry, spec.kind);
  return source.evaluate(GuidanceContext{entry.t, timestep, &z_t, &entry, &plan});
}

}  // namespace featguide
