#include "doctest.h"
#include "featguide/guidance.hpp"
#include "support.hpp"

using namespace featguide;
using namespace fgtest;
using nlohmann::json;

namespace {

// ---- independent oracles ----

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

std::vector<double> cell(const Tensor& f, std::size_t y, std::size_t x) {
  std::vector<double> v(f.dim(0));
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = f.at(c, y, x);
  return v;
}

// Bilinear read with cell centers at i + 0.5, edges clamped.
std::vector<double> sample(const Tensor& f, double y, double x) {
  const double h = static_cast<double>(f.dim(1)), w = static_cast<double>(f.dim(2));
  const double fy = std::min(std::max(y - 0.5, 0.0), h - 1), fx = std::min(std::max(x - 0.5, 0.0), w - 1);
  const std::size_t y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
  const std::size_t y1 = std::min<std::size_t>(y0 + 1, f.dim(1) - 1), x1 = std::min<std::size_t>(x0 + 1, f.dim(2) - 1);
  const double ty = fy - y0, tx = fx - x0;
  std::vector<double> v(f.dim(0));
  for (std::size_t c = 0; c < v.size(); ++c) {
    v[c] = (1 - ty) * ((1 - tx) * f.at(c, y0, x0) + tx * f.at(c, y0, x1)) +
           ty * ((1 - tx) * f.at(c, y1, x0) + tx * f.at(c, y1, x1));
  }
  return v;
}

double oracle_local(const Tensor& gen, const Tensor& gud, const std::vector<CellPair>& pairs) {
  double s = 0;
  for (const CellPair& p : pairs) s += 0.5 * cosine(cell(gen, p.gen_y, p.gen_x), sample(gud, p.gud_y, p.gud_x)) + 0.5;
  return s / pairs.size();
}

double oracle_local(const Tensor& gen, const Tensor& gud, const Mask& m) {
  double s = 0;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(y, x)) s += 0.5 * cosine(cell(gen, y, x), cell(gud, y, x)) + 0.5;
  return s / m.count();
}

std::vector<double> region_mean(const Tensor& f, const Mask& m) {
  std::vector<double> mu(f.dim(0), 0.0);
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(y, x))
        for (std::size_t c = 0; c < mu.size(); ++c) mu[c] += f.at(c, y, x) / m.count();
  return mu;
}

double oracle_global(const Tensor& gen, const Mask& mg, const Tensor& gud, const Mask& mu) {
  return 0.5 * cosine(region_mean(gen, mg), region_mean(gud, mu)) + 0.5;
}

Tensor constant_features(std::size_t c, std::size_t h, std::size_t w, const std::vector<double>& v) {
  Tensor t({c, h, w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) t.at(k, y, x) = v[k];
  return t;
}

GuidedFeatures guided_with(const Tensor& f_gud, std::size_t layer, const std::optional<Tensor>& f_ref = {}) {
  GuidedFeatures g;
  g.gud.layers[layer - 1] = f_gud;
  if (f_ref) {
    g.ref = FeatureStack{};
    g.ref->layers[layer - 1] = *f_ref;
  }
  return g;
}

// Gradient of a feature-space scalar checked by central differences on every entry.
void check_feature_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& grad) {
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = 1e-6;
    xp[i] = x[i] + h;
    const double up = f(xp);
    xp[i] = x[i] - h;
    const double down = f(xp);
    xp[i] = x[i];
    CHECK(std::abs((up - down) / (2 * h) - grad[i]) < 1e-7);
  }
}

}  // namespace

TEST_CASE("local similarity examples") {
  Gen g(1);
  const Tensor f = random_tensor(g, {4, 3, 3});
  const Mask all(3, 3, true);
  CHECK(s_local(f, f, all).value == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(s_local(-1.0 * f, f, all).value == doctest::Approx(0.0).epsilon(1e-14));
  const Tensor e0 = constant_features(2, 3, 3, {1, 0}), e1 = constant_features(2, 3, 3, {0, 1});
  CHECK(s_local(e0, e1, all).value == doctest::Approx(0.5));
  CHECK_THROWS_AS(s_local(f, f, Mask(3, 3)), ContractError);
  CHECK_THROWS_AS(s_local(f, f, std::vector<CellPair>{}), ContractError);
  CHECK_THROWS_AS(s_local(f, f, Mask(2, 2, true)), ContractError);
}

TEST_CASE("global similarity examples") {
  const Mask all(3, 3, true);
  const Tensor v = constant_features(2, 3, 3, {0.3, -0.7});
  CHECK(s_global(v, all, v, all).value == doctest::Approx(1.0));
  CHECK(s_global(-1.0 * v, all, v, all).value == doctest::Approx(0.0));
  Tensor gen({2, 3, 3});
  gen.at(0, 0, 0) = 2;
  gen.at(1, 0, 1) = 2;
  Mask two(3, 3);
  two.set(0, 0);
  two.set(0, 1);
  CHECK(s_global(gen, two, constant_features(2, 3, 3, {1, 1}), all).value == doctest::Approx(1.0));
  CHECK_THROWS_AS(s_global(v, Mask(3, 3), v, all), ContractError);
}

TEST_CASE("similarities match independent recomputation") {
  Gen g(2);
  for (int i = 0; i < 30; ++i) {
    const std::size_t c = static_cast<std::size_t>(g.integer(1, 6)), h = static_cast<std::size_t>(g.integer(2, 7));
    const Tensor gen = random_tensor(g, {c, h, h}), gud = random_tensor(g, {c, h, h});
    Mask m = random_mask(g, h, h, 0.5);
    m.set(0, 0);
    CHECK(s_local(gen, gud, m).value == doctest::Approx(oracle_local(gen, gud, m)).epsilon(1e-12));
    std::vector<CellPair> pairs;
    for (int k = 0; k < 5; ++k) {
      pairs.push_back({static_cast<std::size_t>(g.integer(0, h - 1)), static_cast<std::size_t>(g.integer(0, h - 1)),
                       g.uniform(0, h), g.uniform(0, h)});
    }
    CHECK(s_local(gen, gud, pairs).value == doctest::Approx(oracle_local(gen, gud, pairs)).epsilon(1e-12));
    Mask m2 = random_mask(g, h, h, 0.5);
    m2.set(h - 1, h - 1);
    CHECK(s_global(gen, m, gud, m2).value == doctest::Approx(oracle_global(gen, m, gud, m2)).epsilon(1e-12));
  }
}

TEST_CASE("similarity gradients match finite differences") {
  Gen g(3);
  const Tensor gen = random_tensor(g, {3, 4, 4}), gud = random_tensor(g, {3, 4, 4});
  const Mask m = random_mask(g, 4, 4, 0.6) | rect(4, 4, 0, 0, 1, 1);
  const Mask m2 = random_mask(g, 4, 4, 0.6) | rect(4, 4, 3, 3, 1, 1);
  const std::vector<CellPair> pairs{{0, 0, 1.3, 2.9}, {2, 3, 0.2, 0.7}, {0, 0, 3.5, 3.5}};
  check_feature_grad([&](const Tensor& x) { return s_local(x, gud, m).value; }, gen, s_local(gen, gud, m).grad);
  check_feature_grad([&](const Tensor& x) { return s_local(x, gud, pairs).value; }, gen,
                     s_local(gen, gud, pairs).grad);
  check_feature_grad([&](const Tensor& x) { return s_global(x, m, gud, m2).value; }, gen,
                     s_global(gen, m, gud, m2).grad);
}

TEST_CASE("similarity invariances") {
  Gen g(4);
  const Tensor gen = random_tensor(g, {3, 5, 5}), gud = random_tensor(g, {3, 5, 5});
  const Mask m = random_mask(g, 5, 5, 0.5) | rect(5, 5, 2, 2, 1, 1);
  // positive rescaling leaves cosine unchanged and scales the gradient by 1/c
  const Similarity a = s_local(gen, gud, m), b = s_local(3.0 * gen, gud, m);
  CHECK(b.value == doctest::Approx(a.value));
  CHECK(max_abs_diff(3.0 * b.grad, a.grad) < 1e-12);
  CHECK(s_local(gen, 0.1 * gud, m).value == doctest::Approx(a.value));
  // global similarity ignores where inside a region a vector sits
  Tensor shuffled = gen;
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x)
      if (m.at(y, x)) cells.emplace_back(y, x);
  std::shuffle(cells.begin(), cells.end(), g.rng);
  std::size_t i = 0;
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x)
      if (m.at(y, x)) {
        for (std::size_t c = 0; c < 3; ++c) shuffled.at(c, y, x) = gen.at(c, cells[i].first, cells[i].second);
        ++i;
      }
  const Mask all(5, 5, true);
  CHECK(s_global(shuffled, m, gud, all).value == doctest::Approx(s_global(gen, m, gud, all).value).epsilon(1e-13));
}

TEST_CASE("energy arithmetic") {
  CHECK(energy_edit(1.0) == 0.2);
  CHECK(energy_edit(0.0) == 1.0);
  CHECK(energy_edit(0.5) == doctest::Approx(1.0 / 3.0));
  double prev = energy_edit(0.0);
  for (int i = 1; i < 100; ++i) {
    const double s = i / 99.0;
    const double e = energy_edit(s);
    CHECK(e < prev);
    CHECK(energy_edit_slope(s) < 0.0);
    CHECK(energy_edit_slope(s) == doctest::Approx((energy_edit(s + 1e-6) - energy_edit(s - 1e-6)) / 2e-6));
    prev = e;
  }
  CHECK(total_energy({{0.2, 0.2, 0.0}}, {1, 1, 0}) == doctest::Approx(0.4));
  CHECK(total_energy({{0.2, 0.2, 5.0}, {0.2, 0.2, 5.0}}, {1, 1, 0}) == doctest::Approx(0.8));
  // a zero weight drops even a non-finite term
  CHECK(total_energy({{0.2, 0.2, std::nan("")}}, {1, 1, 0}) == doctest::Approx(0.4));
}

TEST_CASE("layer energy examples") {
  const BackendProfile p = toy_profile();
  const std::size_t layer = 4;  // full resolution
  GuidanceConfig cfg;
  SUBCASE("identical features give the S = 1 energies") {
    Gen g(5);
    const EditSpec spec = build_moving(rect(16, 16, 3, 3, 3, 3), {0, 6});
    const LayerMasks masks = downsample_masks(spec, p)[layer - 1];
    const Tensor f = random_tensor(g, {16, 16, 16});
    // the edit pairs compare translated cells, so only content is exactly maximal
    const LayerEnergy le = layer_energy(f, guided_with(f, layer), masks, spec, cfg);
    CHECK(le.terms.e_content == doctest::Approx(0.2));
  }
  SUBCASE("antiparallel content gives 1") {
    const Mask all(16, 16, true);
    EditSpec spec = build_moving(rect(16, 16, 3, 3, 3, 3), {0, 0});
    spec.m_share = all;
    const LayerMasks masks = downsample_masks(spec, p)[layer - 1];
    const Tensor f = constant_features(16, 16, 16, std::vector<double>(16, 1.0));
    const LayerEnergy le = layer_energy(-1.0 * f, guided_with(f, layer), masks, spec, cfg);
    CHECK(le.terms.e_content == doctest::Approx(1.0));
  }
  SUBCASE("zero offset has no inpainting term") {
    const EditSpec spec = build_moving(rect(16, 16, 3, 3, 3, 3), {0, 0});
    Gen g(6);
    const Tensor f = random_tensor(g, {16, 16, 16});
    const LayerMasks masks = downsample_masks(spec, p)[layer - 1];
    CHECK(layer_energy(f, guided_with(f, layer), masks, spec, cfg).terms.e_opt == 0.0);
  }
  SUBCASE("inpainting term at its designed optimum is 0.5") {
    // m_ipt = object cells (disjoint move); F_gen on m_ipt equals the reference mean and opposes F_gud there
    const Mask obj = rect(16, 16, 2, 2, 3, 3);
    const EditSpec spec = build_moving(obj, {8, 8});
    const LayerMasks masks = downsample_masks(spec, p)[layer - 1];
    const std::vector<double> u(16, 1.0);
    Tensor gud = constant_features(16, 16, 16, u);
    Tensor gen = gud;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        if (obj.at(y, x))
          for (std::size_t c = 0; c < 16; ++c) {
            gud.at(c, y, x) = -1.0;
            gen.at(c, y, x) = 1.0;
          }
    const LayerEnergy le = layer_energy(gen, guided_with(gud, layer), masks, spec, cfg);
    CHECK(le.terms.e_opt == doctest::Approx(0.5));
  }
}

TEST_CASE("layer energy matches term by term recomputation") {
  Gen g(7);
  const BackendProfile p = toy_profile();
  GuidanceConfig cfg;
  cfg.w_inpaint = 2.5;
  for (int i = 0; i < 40; ++i) {
    for (EditKind kind : kAllKinds) {
      const EditSpec spec = random_spec(g, kind, 16, 16);
      const std::size_t layer = static_cast<std::size_t>(g.integer(2, 4));
      const LayerMasks m = downsample_masks(spec, p)[layer - 1];
      const std::size_t h = m.height;
      const Tensor gen = random_tensor(g, {16, h, h}), gud = random_tensor(g, {16, h, h}),
                   ref = random_tensor(g, {16, h, h});
      const GuidedFeatures guided = guided_with(gud, layer, ref);
      const LayerEnergy le = layer_energy(gen, guided, m, spec, cfg);
      const TaskWeights w = effective_weights(cfg, spec);
      const Tensor& src = needs_reference(kind) ? ref : gud;
      double e_edit = 0, e_content = 0, e_opt = 0;
      if (spec.similarity == SimilarityMode::global) {
        if (!m.gen.none() && !m.gud.none()) e_edit = 1.0 / (1 + 4 * oracle_global(gen, m.gen, src, m.gud));
      } else if (!m.pairs.empty()) {
        e_edit = 1.0 / (1 + 4 * oracle_local(gen, src, m.pairs));
      }
      if (!m.share.none()) e_content = 1.0 / (1 + 4 * oracle_local(gen, gud, m.share));
      if (w.w_opt != 0 && !m.ipt.none()) {
        if (!m.ref.none()) e_opt += 2.5 / (1 + 4 * oracle_global(gen, m.ipt, gud, m.ref));
        e_opt += oracle_local(gen, gud, m.ipt);
      }
      CHECK(le.terms.e_edit == doctest::Approx(e_edit).epsilon(1e-12));
      CHECK(le.terms.e_content == doctest::Approx(e_content).epsilon(1e-12));
      CHECK(le.terms.e_opt == doctest::Approx(e_opt).epsilon(1e-12));
      CHECK(le.weighted == doctest::Approx(w.w_edit * e_edit + w.w_content * e_content + w.w_opt * e_opt));
      // the lazy energy-only path agrees
      CHECK(layer_energy(gen, guided, m, spec, cfg, false).weighted == le.weighted);
    }
  }
}

TEST_CASE("layer energy gradient matches finite differences") {
  Gen g(8);
  const BackendProfile p = toy_profile();
  GuidanceConfig cfg;
  for (EditKind kind : kAllKinds) {
    const EditSpec spec = random_spec(g, kind, 16, 16);
    const LayerMasks m = downsample_masks(spec, p)[2];
    const Tensor gen = random_tensor(g, {16, 8, 8}), gud = random_tensor(g, {16, 8, 8}),
                 ref = random_tensor(g, {16, 8, 8});
    const GuidedFeatures guided = guided_with(gud, 3, ref);
    check_feature_grad([&](const Tensor& x) { return layer_energy(x, guided, m, spec, cfg, false).weighted; }, gen,
                       layer_energy(gen, guided, m, spec, cfg).grad);
  }
}

TEST_CASE("empty supports are skipped with a warning") {
  const BackendProfile p = toy_profile();
  // a 2x2 object vanishes at the 4x downscaled layer
  const EditSpec spec = build_moving(rect(16, 16, 1, 1, 2, 2), {8, 8});
  const LayerMasks m = downsample_masks(spec, p)[1];
  Gen g(9);
  const Tensor f = random_tensor(g, {16, 4, 4});
  const LayerEnergy le = layer_energy(f, guided_with(f, 2), m, spec, GuidanceConfig{});
  CHECK(le.terms.e_edit == 0.0);
  CHECK_FALSE(le.warnings.empty());
  CHECK(le.grad.all_finite());
}

TEST_CASE("latent gradient matches finite differences for every kind") {
  Gen g(10);
  const TextCondition text{"a photo"};
  for (EditKind kind : kAllKinds) {
    for (int i = 0; i < 3; ++i) {
      const GuidanceInstance inst = random_instance(g, kind, text);
      const GuidanceConfig cfg = resolve_config(GuidanceConfig{}, inst.spec);
      FeatureGuidance source(toy(), inst.spec, cfg, text);
      const KVPlan plan = build_kv_plan(inst.entry, kind);
      const GuidanceResult r = source.evaluate({inst.entry.t, inst.timestep, &inst.z_t, &inst.entry, &plan});
      CHECK(r.grad.shape() == inst.z_t.data.shape());
      CHECK(r.energy == doctest::Approx(source.energy(inst.z_t, inst.timestep, inst.entry, plan)));
      // the guided side is frozen: perturbing z_t never moves F_gud
      const double err = directional_error(
          [&](const Tensor& x) { return source.energy(Latent{x}, inst.timestep, inst.entry, plan); }, inst.z_t.data,
          r.grad, g);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("gradient vanishes at the stationary point") {
  Gen g(11);
  const TextCondition text{"a photo"};
  const Latent z = random_latent(g, toy().profile());
  EditSpec spec;
  spec.kind = EditKind::moving;
  spec.height = spec.width = 16;
  spec.m_gen = spec.m_gud = Mask(16, 16);
  spec.m_share = Mask(16, 16, true);
  spec.m_ipt = Mask(16, 16);
  const BankEntry entry = make_entry(toy(), z, std::nullopt, 30, 600, text);
  const GuidanceResult r = guidance_gradient(toy(), z, 600, entry, spec, resolve_config({}, spec), text);
  CHECK(r.grad.l2_norm() < 1e-6);
  CHECK(r.terms.e_content == doctest::Approx(0.4));  // 0.2 at each of two layers
}

TEST_CASE("multi-scale energy is the sum over layers") {
  Gen g(12);
  const TextCondition text{"x"};
  const GuidanceInstance inst = random_instance(g, EditKind::moving, text);
  const KVPlan plan = build_kv_plan(inst.entry, EditKind::moving);
  auto energy_with = [&](std::vector<std::size_t> layers) {
    GuidanceConfig cfg = resolve_config({}, inst.spec);
    cfg.layers = std::move(layers);
    FeatureGuidance src(toy(), inst.spec, cfg, text);
    return src.evaluate({inst.entry.t, inst.timestep, &inst.z_t, &inst.entry, &plan});
  };
  const GuidanceResult both = energy_with({2, 3}), two = energy_with({2}), three = energy_with({3});
  CHECK(both.energy == doctest::Approx(two.energy + three.energy).epsilon(1e-12));
  CHECK(max_abs_diff(both.grad, two.grad + three.grad) < 1e-10);
  // listing a layer twice doubles it
  const GuidanceResult twice = energy_with({3, 3});
  CHECK(twice.energy == doctest::Approx(2 * three.energy));
}

TEST_CASE("non-finite features raise a diagnostic") {
  Gen g(13);
  const TextCondition text{"x"};
  RiggedBackend poisoned(toy(), nullptr);
  poisoned.poison_features = true;
  const GuidanceInstance inst = random_instance(g, EditKind::moving, text);
  try {
    guidance_gradient(poisoned, inst.z_t, inst.timestep, inst.entry, inst.spec, resolve_config({}, inst.spec), text);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("layer") != std::string::npos);
  }
}

TEST_CASE("reference tasks need reference features") {
  Gen g(14);
  const TextCondition text{"x"};
  GuidanceInstance inst = random_instance(g, EditKind::pasting, text);
  inst.entry.z_ref.reset();
  inst.entry.kv_ref.reset();
  CHECK_THROWS_AS(
      guidance_gradient(toy(), inst.z_t, inst.timestep, inst.entry, inst.spec, resolve_config({}, inst.spec), text),
      ContractError);
}

TEST_CASE("weights resolve through defaults, config and spec") {
  const EditSpec moving = build_moving(rect(16, 16, 2, 2, 3, 3), {4, 4});
  const EditSpec replacing = build_replacing(rect(16, 16, 2, 2, 3, 3), rect(16, 16, 8, 8, 3, 3));
  GuidanceConfig cfg;
  CHECK(effective_weights(cfg, moving).w_opt > 0.0);
  cfg.w_opt = 3.0;
  cfg.w_edit = 7.0;
  CHECK(effective_weights(cfg, replacing).w_opt == 0.0);
  CHECK(effective_weights(cfg, moving).w_opt == 3.0);
  EditSpec over = moving;
  over.weights.w_edit = 1.5;
  over.weights.w_inpaint = 0.5;
  CHECK(effective_weights(cfg, over).w_edit == 1.5);
  const GuidanceConfig r = resolve_config(cfg, over);
  CHECK(*r.w_edit == 1.5);
  CHECK(*r.w_opt == 3.0);
  CHECK(*r.w_content == default_weights(EditKind::moving).w_content);
  CHECK(r.w_inpaint == 0.5);
  CHECK(*resolve_config(cfg, replacing).w_opt == 0.0);
}

TEST_CASE("config JSON and validation") {
  GuidanceConfig c;
  c.eta = 3.0;
  c.w_edit = 2.0;
  c.layers = {1, 4};
  c.sigma_scaling = true;
  c.n_gated = 10;
  c.steps = 20;
  CHECK(config_from_json(json::parse(config_to_json(c).dump())) == c);
  CHECK(config_from_json(json(nullptr), c) == c);
  CHECK(config_from_json(json{{"beta", 2}}).beta == 2.0);
  auto field = [](const json& j) {
    try {
      config_from_json(j);
    } catch (const SpecError& e) {
      return e.field();
    }
    return std::string("<no error>");
  };
  CHECK(field({{"alpha", 0}}) == "config.alpha");
  CHECK(field({{"beta", "x"}}) == "config.beta");
  CHECK(field({{"n_gated", 60}}) == "config.n_gated");
  CHECK(field({{"layers", {0}}}) == "config.layers");
  CHECK(field({{"layers", json::array()}}) == "config.layers");
  CHECK(field({{"w_o", -1}}) == "config.w_o");
  CHECK(field({{"cfg_scale", 0.5}}) == "config.cfg_scale");
  CHECK(field({{"sigma_scaling", 1}}) == "config.sigma_scaling");
  CHECK(field(json::array()) == "config");
}
