#include "doctest.h"
#include "featguide/ddim.hpp"
#include "support.hpp"

using namespace featguide;
using namespace fgtest;

namespace {

AttentionRecord capture_kv(const Backend& b, const Latent& z, int ts, const TextCondition& text) {
  return b.predict(z, ts, text, nullptr, {.attention = true}).attention.value();
}

// Independent schedule oracle: alpha_bar(t) = prod_{i<=t} (1 - beta_i).
double oracle_alpha_bar(const ScheduleSpec& s, int train_t) {
  double prod = 1.0;
  for (int i = 1; i <= train_t; ++i) {
    const double frac = static_cast<double>(i - 1) / (s.train_steps - 1);
    const double beta = s.kind == ScheduleKind::linear
                            ? s.beta_start + frac * (s.beta_end - s.beta_start)
                            : std::pow(std::sqrt(s.beta_start) + frac * (std::sqrt(s.beta_end) - std::sqrt(s.beta_start)), 2);
    prod *= 1.0 - beta;
  }
  return prod;
}

}  // namespace

TEST_CASE("toy backend is deterministic and seed dependent") {
  Gen g(3);
  const Latent z = random_latent(g, toy().profile());
  const TextCondition text{"a cat"};
  const auto a = toy().predict(z, 500, text, nullptr, {.features = true, .attention = true});
  const auto b = toy().predict(z, 500, text, nullptr, {.features = true, .attention = true});
  CHECK(a.noise_pred == b.noise_pred);
  CHECK(a.features->layers == b.features->layers);
  CHECK(a.attention == b.attention);
  const ToyBackend other(toy_profile(99));
  CHECK(other.predict(z, 500, text, nullptr, {}).noise_pred != a.noise_pred);
  CHECK(toy().predict(z, 500, TextCondition{}, nullptr, {}).noise_pred != a.noise_pred);
}

TEST_CASE("capture flags only control what is returned") {
  Gen g(4);
  const Latent z = random_latent(g, toy().profile());
  const TextCondition text{"x"};
  const auto bare = toy().predict(z, 300, text, nullptr, {});
  CHECK_FALSE(bare.features);
  CHECK_FALSE(bare.attention);
  CHECK_FALSE(bare.probes);
  const auto full = toy().predict(z, 300, text, nullptr, {true, true, true});
  CHECK(full.noise_pred == bare.noise_pred);
  REQUIRE(full.features);
  const BackendProfile& p = toy().profile();
  for (std::size_t l = 1; l <= kDecoderLayers; ++l) {
    const LayerDims& d = p.feature_dims[l - 1];
    CHECK(full.features->layer(l).shape() ==
          Shape{d.channels, p.image_height() / d.scale, p.image_width() / d.scale});
  }
  CHECK(full.attention->sites.size() == kDecoderLayers);
}

TEST_CASE("self substitution reproduces the plain forward pass") {
  Gen g(5);
  const TextCondition text{"scene"};
  for (int trial = 0; trial < 3; ++trial) {
    const Latent z = random_latent(g, toy().profile());
    const int ts = static_cast<int>(g.integer(0, 999));
    const auto plain = toy().predict(z, ts, text, nullptr, {true, true, true});
    const AttentionRecord kv = *plain.attention;
    const auto sub = toy().predict(z, ts, text, &kv, {true, true, true});
    CHECK(max_abs_diff(plain.noise_pred.data, sub.noise_pred.data) < 1e-12);
    for (std::size_t l = 0; l < kDecoderLayers; ++l) {
      CHECK(max_abs_diff(plain.features->layers[l], sub.features->layers[l]) < 1e-12);
    }
  }
}

TEST_CASE("override changes only decoder self-attention") {
  Gen g(6);
  const TextCondition text{"scene"};
  const Latent z = random_latent(g, toy().profile());
  const Latent other = random_latent(g, toy().profile());
  const AttentionRecord kv = capture_kv(toy(), other, 400, text);
  const auto plain = toy().predict(z, 400, text, nullptr, {.probes = true});
  const auto sub = toy().predict(z, 400, text, &kv, {.probes = true});
  CHECK(sub.noise_pred != plain.noise_pred);
  // encoder activations are upstream of every decoder site
  CHECK(sub.probes->encoder == plain.probes->encoder);
  // the text cross-attention K/V come from the prompt, never from the override
  REQUIRE(sub.probes->text_attention.size() == plain.probes->text_attention.size());
  for (std::size_t i = 0; i < sub.probes->text_attention.size(); ++i) {
    CHECK(sub.probes->text_attention[i].keys == plain.probes->text_attention[i].keys);
    CHECK(sub.probes->text_attention[i].values == plain.probes->text_attention[i].values);
  }
}

TEST_CASE("concatenated override keeps the output shape") {
  Gen g(7);
  const TextCondition text{"scene"};
  const Latent z = random_latent(g, toy().profile());
  const AttentionRecord a = capture_kv(toy(), random_latent(g, toy().profile()), 200, text);
  const AttentionRecord b = capture_kv(toy(), random_latent(g, toy().profile()), 200, text);
  AttentionRecord both;
  for (std::size_t l = 0; l < kDecoderLayers; ++l) {
    both.sites.push_back({concat_tokens(a.sites[l].keys, b.sites[l].keys),
                          concat_tokens(a.sites[l].values, b.sites[l].values)});
  }
  const auto out = toy().predict(z, 200, text, &both, {.features = true});
  CHECK(out.noise_pred.data.shape() == z.data.shape());
  CHECK(out.noise_pred.data.all_finite());
  // concatenating a record with itself is the same distribution as the record alone
  AttentionRecord twice;
  for (const AttentionSite& s : a.sites) twice.sites.push_back({concat_tokens(s.keys, s.keys), concat_tokens(s.values, s.values)});
  CHECK(max_abs_diff(toy().predict(z, 200, text, &twice, {}).noise_pred.data,
                     toy().predict(z, 200, text, &a, {}).noise_pred.data) < 1e-12);
}

TEST_CASE("predict contract errors") {
  Gen g(8);
  const Latent z = random_latent(g, toy().profile());
  CHECK_THROWS_AS(toy().predict(Latent{Tensor({4, 8, 8})}, 10, {}, nullptr, {}), ContractError);
  CHECK_THROWS_AS(toy().predict(z, -1, {}, nullptr, {}), ContractError);
  CHECK_THROWS_AS(toy().predict(z, 1001, {}, nullptr, {}), ContractError);
  AttentionRecord partial = capture_kv(toy(), z, 10, {});
  partial.sites.pop_back();
  CHECK_THROWS_AS(toy().predict(z, 10, {}, &partial, {}), ContractError);
  Latent bad = z;
  bad.data[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(toy().predict(bad, 10, {}, nullptr, {}), ContractError);
}

TEST_CASE("feature vjp matches finite differences") {
  Gen g(9);
  const TextCondition text{"fd"};
  const Latent z = random_latent(g, toy().profile());
  const AttentionRecord kv = capture_kv(toy(), random_latent(g, toy().profile()), 600, text);
  for (const AttentionRecord* override_kv : {static_cast<const AttentionRecord*>(nullptr), &kv}) {
    const auto base = toy().predict(z, 600, text, override_kv, {.features = true});
    FeatureCotangents cot;
    cot[1] = random_tensor(g, base.features->layers[1].shape());
    cot[2] = random_tensor(g, base.features->layers[2].shape());
    const Tensor grad = toy().feature_vjp(z, 600, text, override_kv, cot);
    auto objective = [&](const Tensor& x) {
      const auto out = toy().predict(Latent{x}, 600, text, override_kv, {.features = true});
      return dot(*cot[1], out.features->layers[1]) + dot(*cot[2], out.features->layers[2]);
    };
    for (int trial = 0; trial < 3; ++trial) {
      Tensor dir = random_tensor(g, z.data.shape());
      dir *= 1.0 / dir.l2_norm();
      const double eps = 1e-4;
      const double fd = (objective(z.data + eps * dir) - objective(z.data - eps * dir)) / (2 * eps);
      const double an = dot(grad, dir);
      CHECK(std::abs(fd - an) / std::max(std::abs(an), 1e-8) < 1e-4);
    }
  }
}

TEST_CASE("noise vjp matches finite differences") {
  Gen g(10);
  const TextCondition text{"fd"};
  const Latent z = random_latent(g, toy().profile());
  const Tensor cot = random_tensor(g, z.data.shape());
  const Tensor grad = toy().noise_vjp(z, 250, text, nullptr, cot);
  Tensor dir = random_tensor(g, z.data.shape());
  dir *= 1.0 / dir.l2_norm();
  const double eps = 1e-4;
  auto f = [&](const Tensor& x) { return dot(cot, toy().predict(Latent{x}, 250, text, nullptr, {}).noise_pred.data); };
  const double fd = (f(z.data + eps * dir) - f(z.data - eps * dir)) / (2 * eps);
  CHECK(std::abs(fd - dot(grad, dir)) / std::abs(fd) < 1e-4);
}

TEST_CASE("codec round trips 8-bit images exactly") {
  Gen g(11);
  const BackendProfile& p = toy().profile();
  for (int i = 0; i < 5; ++i) {
    const Image img = random_image(g, p.image_width(), p.image_height());
    const Latent z = toy().encode(img);
    CHECK(z.data.shape() == Shape{p.latent_channels, p.latent_height, p.latent_width});
    CHECK(toy().decode(z) == img);
  }
  CHECK_THROWS_AS(toy().encode(random_image(g, 8, 8)), ContractError);
}

TEST_CASE("latent shapes for the pretrained geometry") {
  const BackendProfile p = pretrained_profile();
  CHECK(latent_shape_for(p, 512, 512) == Shape{4, 64, 64});
  CHECK(latent_shape_for(p, 768, 512) == Shape{4, 96, 64});
  CHECK_THROWS_AS(latent_shape_for(p, 500, 512), ContractError);
  CHECK_THROWS_AS(make_backend(p), ContractError);
  CHECK(make_backend(toy_profile())->profile().hash() == toy_profile().hash());
}

TEST_CASE("noise schedule against an independent product") {
  for (ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::scaled_linear}) {
    ScheduleSpec s;
    s.kind = kind;
    const NoiseSchedule sched(s, 50);
    CHECK(sched.alpha_bar(0) == 1.0);
    CHECK(sched.timestep(50) == 1000);
    CHECK(sched.timestep(1) == 20);
    for (int t = 0; t <= 50; ++t) {
      CHECK(sched.alpha_bar(t) == doctest::Approx(oracle_alpha_bar(s, sched.timestep(t))).epsilon(1e-12));
      if (t > 0) CHECK(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
    }
    CHECK(sched.alpha_bar(50) > 0.0);
  }
  CHECK_THROWS_AS(NoiseSchedule(ScheduleSpec{}, 0), ContractError);
  CHECK_THROWS_AS(NoiseSchedule(ScheduleSpec{}, 1001), ContractError);
  CHECK_THROWS_AS(NoiseSchedule(ScheduleSpec{}, 50).timestep(51), ContractError);
}

TEST_CASE("profile JSON round trip and hash sensitivity") {
  BackendProfile p = toy_profile(77);
  p.schedule.kind = ScheduleKind::linear;
  p.steps = 20;
  const BackendProfile q = profile_from_json(profile_to_json(p));
  CHECK(q.hash() == p.hash());
  CHECK(q.seed == 77);
  BackendProfile r = p;
  r.schedule.beta_end = 0.02;
  CHECK(r.hash() != p.hash());
}

TEST_CASE("ddim transfer identities") {
  Gen g(12);
  const Tensor z = random_tensor(g, {4, 3, 3});
  const Tensor eps = random_tensor(g, {4, 3, 3});
  // same noise level is the identity
  CHECK(max_abs_diff(ddim_transfer(z, eps, 0.4, 0.4), z) < 1e-14);
  // transfer there and back with a fixed eps is exact
  CHECK(max_abs_diff(ddim_transfer(ddim_transfer(z, eps, 0.9, 0.3), eps, 0.3, 0.9), z) < 1e-12);
  // landing on alpha = 1 returns x0
  CHECK(max_abs_diff(ddim_transfer(z, eps, 0.5, 1.0), predict_x0(z, eps, 0.5)) < 1e-14);
  // scalar oracle
  const Tensor one({1}, 0.7), e({1}, -0.2);
  const double x0 = (0.7 - std::sqrt(0.6) * -0.2) / std::sqrt(0.4);
  CHECK(ddim_transfer(one, e, 0.4, 0.8)[0] == doctest::Approx(std::sqrt(0.8) * x0 + std::sqrt(0.2) * -0.2));
}
