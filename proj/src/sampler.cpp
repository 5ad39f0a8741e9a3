#include "featguide/sampler.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "featguide/ddim.hpp"

namespace featguide {

Tensor cfg_noise(const Backend& backend, const Latent& z_t, int timestep, const TextCondition& text,
                 const AttentionRecord* plan, double scale) {
  if (!(scale >= 1.0)) throw ContractError("cfg scale must be >= 1");
  Tensor cond = backend.predict(z_t, timestep, text, plan, {}).noise_pred.data;
  if (scale == 1.0) return cond;
  const Tensor uncond = backend.predict(z_t, timestep, TextCondition::unconditional(), plan, {}).noise_pred.data;
  Tensor out = uncond;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + scale * (cond[i] - uncond[i]);
  return out;
}

Latent ddim_step(const NoiseSchedule& schedule, const Latent& z_t, const Tensor& eps_hat, int t) {
  if (t < 1 || t > schedule.steps()) throw ContractError("ddim_step: t out of range");
  return Latent{ddim_transfer(z_t.data, eps_hat, schedule.alpha_bar(t), schedule.alpha_bar(t - 1)), z_t.space};
}

nlohmann::json step_to_json(const StepRecord& r) {
  nlohmann::json j;
  j["t"] = r.t;
  j["timestep"] = r.timestep;
  j["gated"] = r.gated;
  j["energy"] = r.energy;
  j["e_edit"] = r.terms.e_edit;
  j["e_content"] = r.terms.e_content;
  j["e_opt"] = r.terms.e_opt;
  j["grad_norm"] = r.grad_norm;
  j["grad_max_abs"] = r.grad_max_abs;
  j["eps_max_abs"] = r.eps_max_abs;
  j["eta"] = r.eta;
  j["seconds"] = r.seconds;
  j["warnings"] = r.warnings;
  return j;
}

std::string step_log_ndjson(const std::vector<StepRecord>& log) {
  std::string out;
  for (const StepRecord& r : log) {
    out += step_to_json(r).dump();
    out += '\n';
  }
  return out;
}

RunResult run(const Backend& backend, const MemoryBank& bank, EditKind kind, const GuidanceConfig& config,
              const TextCondition& text, const RunOptions& options) {
  using clock = std::chrono::steady_clock;
  validate(config);
  const int T = bank.steps;
  if (T != config.steps) {
    throw ContractError("bank has " + std::to_string(T) + " steps, config asks for " + std::to_string(config.steps));
  }
  if (static_cast<int>(bank.entries.size()) != T) throw ContractError("memory bank is incomplete");
  const NoiseSchedule schedule = backend.schedule(T);
  const auto run_start = clock::now();

  RunResult result;
  Latent z = bank.z_T_gen;
  std::optional<double> eta = config.eta;
  int gated_index = 0;
  for (int t = T; t >= 1; --t) {
    if (options.cancel && options.cancel->load()) {
      result.cancelled = true;
      break;
    }
    const auto step_start = clock::now();
    const BankEntry& entry = lookup(bank, t);
    const KVPlan plan = build_kv_plan(entry, kind);
    StepRecord rec;
    rec.t = t;
    rec.timestep = schedule.timestep(t);
    Tensor eps = cfg_noise(backend, z, rec.timestep, text, &plan.record, config.cfg_scale);
    rec.eps_max_abs = eps.max_abs();

    rec.gated = options.guidance != nullptr && T - t < config.n_gated;
    if (rec.gated) {
      GuidanceResult g = options.guidance->evaluate(GuidanceContext{t, rec.timestep, &z, &entry, &plan});
      ++result.gradient_evaluations;
      if (!g.grad.all_finite() || !std::isfinite(g.energy)) {
        throw std::runtime_error("step " + std::to_string(t) + ": guidance produced non-finite values");
      }
      rec.energy = g.energy;
      rec.terms = g.terms;
      rec.grad_norm = g.grad.l2_norm();
      rec.grad_max_abs = g.grad.max_abs();
      rec.warnings = std::move(g.warnings);
      if (!eta) {
        eta = rec.grad_max_abs > 0.0 ? rec.eps_max_abs / rec.grad_max_abs : 0.0;
        rec.warnings.push_back("eta calibrated to " + std::to_string(*eta));
      }
      double step_eta = options.eta_schedule ? options.eta_schedule(gated_index, *eta) : *eta;
      if (config.sigma_scaling) step_eta *= std::sqrt(1.0 - schedule.alpha_bar(t));
      rec.eta = step_eta;
      for (std::size_t i = 0; i < eps.size(); ++i) eps[i] += step_eta * g.grad[i];
      ++gated_index;
    }

    if (config.preview_every > 0 && options.on_preview && (T - t + 1) % config.preview_every == 0) {
      options.on_preview(t, Latent{predict_x0(z.data, eps, schedule.alpha_bar(t)), z.space});
    }
    z = ddim_step(schedule, z, eps, t);
    if (!z.data.all_finite()) throw std::runtime_error("step " + std::to_string(t) + ": latent became non-finite");
    rec.seconds = std::chrono::duration<double>(clock::now() - step_start).count();
    if (options.on_step) options.on_step(rec);
    result.log.push_back(std::move(rec));
  }
  result.z0 = std::move(z);
  result.eta = eta;
  result.inference_seconds = std::chrono::duration<double>(clock::now() - run_start).count();
  return result;
}

}  // namespace featguide
