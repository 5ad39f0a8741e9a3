#pragma once

#include <atomic>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "featguide/guidance.hpp"

namespace featguide {

/// eps_uncond + scale (eps_cond - eps_uncond), both passes under `plan`.
/// scale == 1 runs the conditional pass only.
Tensor cfg_noise(const Backend& backend, const Latent& z_t, int timestep, const TextCondition& text,
                 const AttentionRecord* plan, double scale);

/// Deterministic DDIM update from step t to t - 1.
Latent ddim_step(const NoiseSchedule& schedule, const Latent& z_t, const Tensor& eps_hat, int t);

struct StepRecord {
  int t = 0;
  int timestep = 0;
  bool gated = false;
  double energy = 0.0;
  EnergyTerms terms;
  double grad_norm = 0.0;
  double grad_max_abs = 0.0;
  double eps_max_abs = 0.0;
  double eta = 0.0;
  double seconds = 0.0;
  std::vector<std::string> warnings;
};

nlohmann::json step_to_json(const StepRecord& record);
/// One JSON object per line.
std::string step_log_ndjson(const std::vector<StepRecord>& log);

struct RunOptions {
  /// Null runs without gradient guidance.
  GuidanceSource* guidance = nullptr;
  std::function<void(const StepRecord&)> on_step;
  /// Called every `preview_every` steps with the predicted clean latent.
  std::function<void(int t, const Latent& x0)> on_preview;
  const std::atomic<bool>* cancel = nullptr;
  /// Learning rate for the k-th gated step (k from 0). Default keeps eta constant.
  std::function<double(int k, double eta)> eta_schedule;
};

struct RunResult {
  Latent z0;
  std::vector<StepRecord> log;
  int gradient_evaluations = 0;
  bool cancelled = false;
  /// Learning rate after calibration; unset when no gated step ran.
  std::optional<double> eta;
  double inference_seconds = 0.0;
};

/// Guided sampling from bank.z_T_gen down to z_0. Steps with T - t < n_gated
/// add eta * grad E to eps_hat after classifier-free mixing.
RunResult run(const Backend& backend, const MemoryBank& bank, EditKind kind, const GuidanceConfig& config,
              const TextCondition& text, const RunOptions& options = {});

}  // namespace featguide
