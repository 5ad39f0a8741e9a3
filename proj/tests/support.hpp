#pragma once

// Shared fixtures: seeded generators and a backend wrapper with rigged outputs.

#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "featguide/attention_control.hpp"
#include "featguide/sampler.hpp"
#include "featguide/edit_tasks.hpp"
#include "featguide/inversion.hpp"
#include "featguide/toy_backend.hpp"

namespace fgtest {

using namespace featguide;

struct Gen {
  explicit Gen(std::uint64_t seed) : rng(seed) {}
  std::mt19937_64 rng;

  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  long integer(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }
};

inline Tensor random_tensor(Gen& g, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * g.normal();
  return t;
}

inline Latent random_latent(Gen& g, const BackendProfile& p, double scale = 0.6) {
  return Latent{random_tensor(g, {p.latent_channels, p.latent_height, p.latent_width}, scale)};
}

inline Image random_image(Gen& g, std::size_t w, std::size_t h) {
  Image img{w, h, std::vector<std::uint8_t>(3 * w * h)};
  for (auto& b : img.rgb) b = static_cast<std::uint8_t>(g.integer(0, 255));
  return img;
}

inline Mask rect(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t rh, std::size_t rw) {
  Mask m(h, w);
  for (std::size_t y = y0; y < y0 + rh; ++y)
    for (std::size_t x = x0; x < x0 + rw; ++x) m.set(y, x);
  return m;
}

inline Mask random_mask(Gen& g, std::size_t h, std::size_t w, double density) {
  Mask m(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) m.set(y, x, g.coin(density));
  return m;
}

/// Random axis-aligned rectangle with sides in [lo, hi].
inline Mask random_rect(Gen& g, std::size_t h, std::size_t w, long lo, long hi) {
  const long rh = g.integer(lo, hi), rw = g.integer(lo, hi);
  const long y0 = g.integer(0, static_cast<long>(h) - rh), x0 = g.integer(0, static_cast<long>(w) - rw);
  return rect(h, w, y0, x0, rh, rw);
}

/// Random offset that keeps `m` on the grid.
inline Offset random_fitting_offset(Gen& g, const Mask& m) {
  const Mask::Box b = m.bbox();
  const long h = static_cast<long>(m.height()), w = static_cast<long>(m.width());
  return Offset{static_cast<int>(g.integer(-static_cast<long>(b.y0), h - 1 - static_cast<long>(b.y1))),
                static_cast<int>(g.integer(-static_cast<long>(b.x0), w - 1 - static_cast<long>(b.x1)))};
}

/// One random, valid spec of the given kind on an h x w grid.
inline EditSpec random_spec(Gen& g, EditKind kind, std::size_t h, std::size_t w) {
  switch (kind) {
    case EditKind::moving: {
      const Mask obj = random_rect(g, h, w, 3, 7);
      return build_moving(obj, random_fitting_offset(g, obj));
    }
    case EditKind::resizing: {
      const Mask obj = rect(h, w, g.integer(4, 7), g.integer(4, 7), g.integer(3, 5), g.integer(3, 5));
      return build_resizing(obj, g.uniform(0.6, 1.8), Offset{static_cast<int>(g.integer(-1, 1)),
                                                            static_cast<int>(g.integer(-1, 1))});
    }
    case EditKind::replacing: return build_replacing(random_rect(g, h, w, 3, 8), random_rect(g, h, w, 3, 8));
    case EditKind::pasting: {
      const Mask ref = random_rect(g, h, w, 3, 7);
      return build_pasting(ref, translate(ref, random_fitting_offset(g, ref)));
    }
    case EditKind::dragging: {
      DragPointSet set;
      const long n = g.integer(1, 3);
      for (long i = 0; i < n; ++i) {
        set.points.push_back({{g.integer(0, static_cast<long>(h) - 1), g.integer(0, static_cast<long>(w) - 1)},
                              {g.integer(0, static_cast<long>(h) - 1), g.integer(0, static_cast<long>(w) - 1)}});
      }
      Mask keep(h, w);
      for (const PatchPair& p : drag_patch_pairs(set.points, h, w, 1)) {
        keep.set(p.gen_y, p.gen_x);
        keep.set(p.gud_y, p.gud_x);
      }
      set.share = complement(dilate(keep, 2));
      if (set.share.none()) set.share = rect(h, w, 0, 0, 2, 2);
      return build_dragging(set);
    }
  }
  throw std::logic_error("kind");
}

inline constexpr EditKind kAllKinds[] = {EditKind::moving, EditKind::resizing, EditKind::replacing, EditKind::pasting,
                                         EditKind::dragging};

/// Bank entry for step t built directly from latents (no inversion).
inline BankEntry make_entry(const Backend& backend, const Latent& z_gud, const std::optional<Latent>& z_ref, int t,
                            int timestep, const TextCondition& text) {
  BankEntry e;
  e.t = t;
  e.z_gud = z_gud;
  e.kv_gud = backend.predict(z_gud, timestep, text, nullptr, {.attention = true}).attention.value();
  if (z_ref) {
    e.z_ref = *z_ref;
    e.kv_ref = backend.predict(*z_ref, timestep, text, nullptr, {.attention = true}).attention.value();
  }
  return e;
}

/// Delegates to a real backend; optionally replaces noise_pred and poisons features.
class RiggedBackend final : public Backend {
 public:
  using NoiseFn = std::function<Tensor(const Latent&, int, const TextCondition&)>;

  RiggedBackend(const Backend& inner, NoiseFn fn) : inner_(inner), fn_(std::move(fn)) {}

  const BackendProfile& profile() const override { return inner_.profile(); }

  DenoiseOutput predict(const Latent& latent, int timestep, const TextCondition& text,
                        const AttentionRecord* override_kv, CaptureFlags capture) const override {
    ++calls;
    if (text.prompt.empty()) ++uncond_calls;
    DenoiseOutput out = inner_.predict(latent, timestep, text, override_kv, capture);
    if (fn_) out.noise_pred.data = fn_(latent, timestep, text);
    if (poison_features && out.features) {
      for (Tensor& f : out.features->layers) f[0] = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
  }

  Tensor feature_vjp(const Latent& latent, int timestep, const TextCondition& text, const AttentionRecord* override_kv,
                     const FeatureCotangents& cot) const override {
    return inner_.feature_vjp(latent, timestep, text, override_kv, cot);
  }

  Latent encode(const Image& image) const override { return inner_.encode(image); }
  Image decode(const Latent& latent) const override { return inner_.decode(latent); }

  mutable std::atomic<int> calls{0};
  mutable std::atomic<int> uncond_calls{0};
  bool poison_features = false;

 private:
  const Backend& inner_;
  NoiseFn fn_;
};

inline const ToyBackend& toy() {
  static const ToyBackend backend(toy_profile());
  return backend;
}

/// Relative error of <grad, d> against a central difference of f along d.
/// d mixes a random unit vector with the normalized gradient so the
/// projection cannot vanish by accident.
inline double directional_error(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& grad,
                                Gen& g, double eps = 1e-4) {
  Tensor d = random_tensor(g, x.shape());
  d *= 0.5 / d.l2_norm();
  const double gn = grad.l2_norm();
  if (gn > 0.0) d += (1.0 / gn) * grad;
  d *= 1.0 / d.l2_norm();
  const double fd = (f(x + eps * d) - f(x - eps * d)) / (2.0 * eps);
  const double an = dot(grad, d);
  return std::abs(fd - an) / std::max({std::abs(an), std::abs(fd), 1e-300});
}

/// One random guidance instance: a bank entry at a random step and a perturbed z_t.
struct GuidanceInstance {
  EditSpec spec;
  BankEntry entry;
  Latent z_t;
  int timestep = 0;
};

inline GuidanceInstance random_instance(Gen& g, EditKind kind, const TextCondition& text) {
  const BackendProfile& p = toy().profile();
  GuidanceInstance inst;
  inst.spec = random_spec(g, kind, p.image_height(), p.image_width());
  const Latent z_gud = random_latent(g, p);
  std::optional<Latent> z_ref;
  if (needs_reference(kind)) z_ref = random_latent(g, p);
  const int t = static_cast<int>(g.integer(1, 50));
  inst.timestep = toy().schedule(50).timestep(t);
  inst.entry = make_entry(toy(), z_gud, z_ref, t, inst.timestep, text);
  inst.z_t = z_gud;
  for (double& v : inst.z_t.data.values()) v += 0.3 * g.normal();
  return inst;
}

}  // namespace fgtest

namespace fgtest {

/// E(z_t) = 0.5 |z_t[patch] - sqrt(alpha_bar_t) target|^2 over a square latent
/// patch, all channels: a pull toward the target at the current noise level.
class QuadraticPull final : public GuidanceSource {
 public:
  QuadraticPull(NoiseSchedule schedule, Tensor target, std::size_t y0, std::size_t x0, std::size_t size)
      : schedule_(std::move(schedule)), target_(std::move(target)), y0_(y0), x0_(x0), size_(size) {}

  GuidanceResult evaluate(const GuidanceContext& ctx) override {
    GuidanceResult r;
    r.grad = Tensor(ctx.z_t->data.shape());
    const double level = std::sqrt(schedule_.alpha_bar(ctx.t));
    for (std::size_t c = 0; c < r.grad.dim(0); ++c) {
      for (std::size_t y = 0; y < size_; ++y) {
        for (std::size_t x = 0; x < size_; ++x) {
          const double d = ctx.z_t->data.at(c, y0_ + y, x0_ + x) - level * target_.at(c, y, x);
          r.grad.at(c, y0_ + y, x0_ + x) = d;
          r.energy += 0.5 * d * d;
        }
      }
    }
    return r;
  }

  double distance(const Latent& z) const {
    double s = 0.0;
    for (std::size_t c = 0; c < target_.dim(0); ++c)
      for (std::size_t y = 0; y < size_; ++y)
        for (std::size_t x = 0; x < size_; ++x) {
          const double d = z.data.at(c, y0_ + y, x0_ + x) - target_.at(c, y, x);
          s += d * d;
        }
    return std::sqrt(s);
  }

 private:
  NoiseSchedule schedule_;
  Tensor target_;
  std::size_t y0_, x0_, size_;
};

/// Guided vs unguided patch distance for one seed; returns {guided, unguided}.
inline std::pair<double, double> quadratic_pull_trial(std::uint64_t seed, double cfg_scale = 5.0, int steps = 50,
                                                      int n_gated = 30) {
  Gen g(seed);
  const BackendProfile& p = toy().profile();
  const TextCondition text{"a photo"};
  const Latent z0 = toy().encode(random_image(g, p.image_width(), p.image_height()));
  const MemoryBank bank = invert(toy(), z0, std::nullopt, steps, text);
  const std::size_t size = 4;
  const std::size_t y0 = static_cast<std::size_t>(g.integer(0, 12)), x0 = static_cast<std::size_t>(g.integer(0, 12));
  QuadraticPull pull(toy().schedule(steps), random_tensor(g, {p.latent_channels, size, size}, 0.6), y0, x0, size);
  GuidanceConfig cfg;
  cfg.steps = steps;
  cfg.n_gated = n_gated;
  cfg.cfg_scale = cfg_scale;
  const RunResult plain = run(toy(), bank, EditKind::moving, cfg, text);
  RunOptions options;
  options.guidance = &pull;
  const RunResult guided = run(toy(), bank, EditKind::moving, cfg, text, options);
  return {pull.distance(guided.z0), pull.distance(plain.z0)};
}

}  // namespace fgtest
