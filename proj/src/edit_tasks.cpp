#include "featguide/edit_tasks.hpp"

#include <cmath>

namespace featguide {

std::array<double, 2> PairingMap::gud_coord(double gen_y, double gen_x) const {
  return {gud_anchor_y + (gen_y - gen_anchor_y) / gamma, gud_anchor_x + (gen_x - gen_anchor_x) / gamma};
}

PairingMap PairingMap::translation(Offset offset) {
  PairingMap p;
  p.kind = PairingKind::translation;
  p.gen_anchor_y = offset.dy;
  p.gen_anchor_x = offset.dx;
  return p;
}

namespace {

void require_nonempty(const Mask& m, const char* field) {
  if (m.cells() == 0) throw SpecError(field, "mask has no cells");
  if (m.none()) throw SpecError(field, "mask is empty");
}

void require_grid(const Mask& a, const Mask& b, const char* field) {
  if (!a.same_grid(b)) {
    throw SpecError(field, "mask is " + std::to_string(b.height()) + "x" + std::to_string(b.width()) + ", expected " +
                               std::to_string(a.height()) + "x" + std::to_string(a.width()));
  }
}

Mask default_reference(const Mask& ipt, const Mask& object, const Mask& gen) {
  return dilate(ipt, kReferenceRing) - (object | gen);
}

EditSpec moving_like(EditKind kind, const Mask& object, const Mask& gen, const std::optional<Mask>& reference_region) {
  EditSpec spec;
  spec.kind = kind;
  spec.height = object.height();
  spec.width = object.width();
  spec.m_gud = object;
  spec.m_gen = gen;
  spec.m_share = complement(gen | object);
  spec.m_ipt = object - gen;
  if (reference_region) {
    require_grid(object, *reference_region, "reference_region");
    require_nonempty(*reference_region, "reference_region");
    spec.m_ref = *reference_region;
  } else {
    spec.m_ref = default_reference(*spec.m_ipt, object, gen);
  }
  spec.similarity = SimilarityMode::local;
  return spec;
}

}  // namespace

EditSpec build_moving(const Mask& object_mask, Offset offset, const std::optional<Mask>& reference_region) {
  require_nonempty(object_mask, "object_mask");
  if (!fits_after_translate(object_mask, offset)) {
    throw SpecError("offset", "translated object leaves the " + std::to_string(object_mask.height()) + "x" +
                                  std::to_string(object_mask.width()) + " grid");
  }
  EditSpec spec = moving_like(EditKind::moving, object_mask, translate(object_mask, offset), reference_region);
  spec.pairing = PairingMap::translation(offset);
  spec.offset = offset;
  return spec;
}

EditSpec build_resizing(const Mask& object_mask, double gamma, Offset offset,
                        const std::optional<Mask>& reference_region) {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw SpecError("scale", "must be a positive finite number");
  require_nonempty(object_mask, "object_mask");
  const Mask::Box box = object_mask.bbox();
  PairingMap pairing;
  pairing.kind = PairingKind::scale;
  pairing.gamma = gamma;
  pairing.gud_anchor_y = 0.5 * static_cast<double>(box.y0 + box.y1 + 1);
  pairing.gud_anchor_x = 0.5 * static_cast<double>(box.x0 + box.x1 + 1);
  pairing.gen_anchor_y = pairing.gud_anchor_y + offset.dy;
  pairing.gen_anchor_x = pairing.gud_anchor_x + offset.dx;

  Mask gen(object_mask.height(), object_mask.width());
  for (std::size_t y = 0; y < gen.height(); ++y) {
    for (std::size_t x = 0; x < gen.width(); ++x) {
      const auto [sy, sx] = pairing.gud_coord(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5);
      gen.set(y, x, object_mask.contains(static_cast<long>(std::floor(sy)), static_cast<long>(std::floor(sx))));
    }
  }
  if (gen.none()) throw SpecError("scale", "resized object vanishes from the grid");
  EditSpec spec = moving_like(EditKind::resizing, object_mask, gen, reference_region);
  spec.pairing = pairing;
  spec.gamma = gamma;
  spec.offset = offset;
  return spec;
}

EditSpec build_replacing(const Mask& m_gen_object, const Mask& m_gud_reference) {
  require_nonempty(m_gen_object, "target_mask");
  require_nonempty(m_gud_reference, "reference_mask");
  require_grid(m_gen_object, m_gud_reference, "reference_mask");
  EditSpec spec;
  spec.kind = EditKind::replacing;
  spec.height = m_gen_object.height();
  spec.width = m_gen_object.width();
  spec.m_gen = m_gen_object;
  spec.m_gud = m_gud_reference;
  spec.m_share = complement(m_gen_object);
  spec.similarity = SimilarityMode::global;
  spec.uses_reference_image = true;
  return spec;
}

EditSpec build_pasting(const Mask& m_gud_in_reference, const Mask& m_gen_target) {
  require_nonempty(m_gud_in_reference, "reference_mask");
  require_nonempty(m_gen_target, "target_mask");
  require_grid(m_gud_in_reference, m_gen_target, "target_mask");
  if (m_gud_in_reference.count() != m_gen_target.count()) {
    throw SpecError("target_mask", "covers " + std::to_string(m_gen_target.count()) + " cells but reference_mask covers " +
                                       std::to_string(m_gud_in_reference.count()));
  }
  const Mask::Box g = m_gen_target.bbox();
  const Mask::Box r = m_gud_in_reference.bbox();
  const Offset offset{static_cast<int>(g.y0) - static_cast<int>(r.y0), static_cast<int>(g.x0) - static_cast<int>(r.x0)};
  if (!fits_after_translate(m_gud_in_reference, offset) || translate(m_gud_in_reference, offset) != m_gen_target) {
    throw SpecError("target_mask", "is not a translated copy of reference_mask");
  }
  EditSpec spec;
  spec.kind = EditKind::pasting;
  spec.height = m_gen_target.height();
  spec.width = m_gen_target.width();
  spec.m_gen = m_gen_target;
  spec.m_gud = m_gud_in_reference;
  spec.m_share = complement(m_gen_target);
  spec.pairing = PairingMap::translation(offset);
  spec.offset = offset;
  spec.similarity = SimilarityMode::local;
  spec.uses_reference_image = true;
  return spec;
}

std::vector<PatchPair> drag_patch_pairs(const std::vector<DragPair>& points, std::size_t height, std::size_t width,
                                        std::size_t scale) {
  std::vector<PatchPair> pairs;
  const long h = static_cast<long>(height);
  const long w = static_cast<long>(width);
  const long s = static_cast<long>(scale);
  auto inside = [&](long y, long x) { return y >= 0 && x >= 0 && y < h && x < w; };
  for (const DragPair& p : points) {
    const long sy = p.source.y / s, sx = p.source.x / s;
    const long ty = p.target.y / s, tx = p.target.x / s;
    for (long dy = -1; dy <= 1; ++dy) {
      for (long dx = -1; dx <= 1; ++dx) {
        if (!inside(sy + dy, sx + dx) || !inside(ty + dy, tx + dx)) continue;
        pairs.push_back({static_cast<std::size_t>(ty + dy), static_cast<std::size_t>(tx + dx),
                         static_cast<std::size_t>(sy + dy), static_cast<std::size_t>(sx + dx)});
      }
    }
  }
  return pairs;
}

EditSpec build_dragging(const DragPointSet& set) {
  if (set.points.empty()) throw SpecError("points", "at least one drag pair is required");
  if (set.share.cells() == 0) throw SpecError("share_mask", "mask has no cells");
  const long h = static_cast<long>(set.share.height());
  const long w = static_cast<long>(set.share.width());
  for (std::size_t i = 0; i < set.points.size(); ++i) {
    const DragPair& p = set.points[i];
    auto check = [&](const PixelPoint& q, const char* which) {
      if (q.y < 0 || q.x < 0 || q.y >= h || q.x >= w) {
        throw SpecError("points[" + std::to_string(i) + "]." + which,
                        "(" + std::to_string(q.x) + "," + std::to_string(q.y) + ") is outside the image");
      }
    };
    check(p.source, "source");
    check(p.target, "target");
  }
  EditSpec spec;
  spec.kind = EditKind::dragging;
  spec.height = set.share.height();
  spec.width = set.share.width();
  spec.m_gen = Mask(spec.height, spec.width);
  spec.m_gud = Mask(spec.height, spec.width);
  for (const PatchPair& p : drag_patch_pairs(set.points, spec.height, spec.width, 1)) {
    spec.m_gen.set(p.gen_y, p.gen_x);
    spec.m_gud.set(p.gud_y, p.gud_x);
  }
  spec.m_share = set.share;
  spec.pairing.kind = PairingKind::points;
  spec.pairing.points = set.points;
  spec.similarity = SimilarityMode::local;
  return spec;
}

std::array<LayerMasks, kDecoderLayers> downsample_masks(const EditSpec& spec, const BackendProfile& profile) {
  if (spec.height != profile.image_height() || spec.width != profile.image_width()) {
    throw ContractError("edit spec is " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                        " but the backend expects " + std::to_string(profile.image_height()) + "x" +
                        std::to_string(profile.image_width()));
  }
  std::array<LayerMasks, kDecoderLayers> out;
  for (std::size_t l = 0; l < kDecoderLayers; ++l) {
    LayerMasks& lm = out[l];
    const std::size_t s = profile.feature_dims[l].scale;
    lm.layer = l + 1;
    lm.scale = s;
    lm.height = spec.height / s;
    lm.width = spec.width / s;
    auto down = [&](const Mask& m, const char* name) {
      Mask d = downsample(m, s);
      if (!m.none() && d.none()) lm.emptied.emplace_back(name);
      return d;
    };
    lm.share = down(spec.m_share, "m_share");
    lm.ipt = spec.m_ipt ? down(*spec.m_ipt, "m_ipt") : Mask(lm.height, lm.width);
    lm.ref = spec.m_ref ? down(*spec.m_ref, "m_ref") : Mask(lm.height, lm.width);

    if (spec.kind == EditKind::dragging) {
      lm.gen = Mask(lm.height, lm.width);
      lm.gud = Mask(lm.height, lm.width);
      for (const PatchPair& p : drag_patch_pairs(spec.pairing.points, lm.height, lm.width, s)) {
        lm.gen.set(p.gen_y, p.gen_x);
        lm.gud.set(p.gud_y, p.gud_x);
        lm.pairs.push_back({p.gen_y, p.gen_x, static_cast<double>(p.gud_y) + 0.5, static_cast<double>(p.gud_x) + 0.5});
      }
      continue;
    }
    lm.gen = down(spec.m_gen, "m_gen");
    lm.gud = down(spec.m_gud, "m_gud");
    if (spec.similarity != SimilarityMode::local) continue;
    const double scale = static_cast<double>(s);
    for (std::size_t y = 0; y < lm.height; ++y) {
      for (std::size_t x = 0; x < lm.width; ++x) {
        if (!lm.gen.at(y, x)) continue;
        const auto [gy, gx] =
            spec.pairing.gud_coord((static_cast<double>(y) + 0.5) * scale, (static_cast<double>(x) + 0.5) * scale);
        const double cy = gy / scale, cx = gx / scale;
        if (cy < 0.0 || cx < 0.0 || cy >= static_cast<double>(lm.height) || cx >= static_cast<double>(lm.width)) {
          continue;
        }
        lm.pairs.push_back({y, x, cy, cx});
      }
    }
  }
  return out;
}

Tensor resample_guided(const Tensor& f_gud, const PairingMap& pairing, std::size_t scale) {
  if (f_gud.rank() != 3) throw ContractError("resample_guided expects [C, H, W]");
  if (!pairing.affine()) throw ContractError("resample_guided needs an affine pairing");
  const std::size_t c = f_gud.dim(0), h = f_gud.dim(1), w = f_gud.dim(2);
  const double s = static_cast<double>(scale);
  Tensor out({c, h, w});
  std::vector<double> v(c);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto [gy, gx] = pairing.gud_coord((static_cast<double>(y) + 0.5) * s, (static_cast<double>(x) + 0.5) * s);
      const double cy = gy / s, cx = gx / s;
      if (cy < 0.0 || cx < 0.0 || cy >= static_cast<double>(h) || cx >= static_cast<double>(w)) continue;
      bilinear_sample(f_gud, cy, cx, v);
      for (std::size_t k = 0; k < c; ++k) out.at(k, y, x) = v[k];
    }
  }
  return out;
}

// ---- JSON ----

namespace {

using nlohmann::json;

const char* to_string(SimilarityMode m) { return m == SimilarityMode::local ? "local" : "global"; }

const char* to_string(PairingKind k) {
  switch (k) {
    case PairingKind::identity: return "identity";
    case PairingKind::translation: return "translation";
    case PairingKind::scale: return "scale";
    case PairingKind::points: return "points";
  }
  return "identity";
}

PairingKind pairing_kind_from(const std::string& s) {
  for (PairingKind k : {PairingKind::identity, PairingKind::translation, PairingKind::scale, PairingKind::points}) {
    if (s == to_string(k)) return k;
  }
  throw SpecError("pairing.kind", "unknown pairing '" + s + "'");
}

json points_to_json(const std::vector<DragPair>& points) {
  json arr = json::array();
  for (const DragPair& p : points) {
    arr.push_back({{"source", {p.source.x, p.source.y}}, {"target", {p.target.x, p.target.y}}});
  }
  return arr;
}

PixelPoint point_from(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer()) {
    throw SpecError(field, "expected [x, y] integers");
  }
  return PixelPoint{j[1].get<long>(), j[0].get<long>()};
}

std::vector<DragPair> points_from_json(const json& arr) {
  if (!arr.is_array()) throw SpecError("points", "expected an array");
  std::vector<DragPair> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string base = "points[" + std::to_string(i) + "]";
    if (!arr[i].is_object()) throw SpecError(base, "expected {source, target}");
    if (!arr[i].contains("source")) throw SpecError(base + ".source", "missing");
    if (!arr[i].contains("target")) throw SpecError(base + ".target", "missing");
    out.push_back({point_from(arr[i]["source"], base + ".source"), point_from(arr[i]["target"], base + ".target")});
  }
  return out;
}

json weights_to_json(const WeightOverrides& w) {
  json j = json::object();
  if (w.w_edit) j["w_e"] = *w.w_edit;
  if (w.w_content) j["w_c"] = *w.w_content;
  if (w.w_opt) j["w_o"] = *w.w_opt;
  if (w.w_inpaint) j["w_i"] = *w.w_inpaint;
  return j;
}

WeightOverrides weights_from_json(const json& j) {
  if (!j.is_object()) throw SpecError("weights", "expected an object");
  WeightOverrides w;
  auto get = [&](const char* key, std::optional<double>& slot) {
    if (!j.contains(key)) return;
    if (!j[key].is_number() || !std::isfinite(j[key].get<double>()) || j[key].get<double>() < 0.0) {
      throw SpecError(std::string("weights.") + key, "expected a non-negative number");
    }
    slot = j[key].get<double>();
  };
  get("w_e", w.w_edit);
  get("w_c", w.w_content);
  get("w_o", w.w_opt);
  get("w_i", w.w_inpaint);
  return w;
}

Mask mask_field(const json& j, const char* field, std::size_t height, std::size_t width) {
  if (!j.contains(field)) throw SpecError(field, "missing");
  if (!j[field].is_string()) throw SpecError(field, "expected a base64 PNG string");
  Mask m;
  try {
    m = mask_from_base64_png(j[field].get<std::string>());
  } catch (const ContractError& e) {
    throw SpecError(field, e.what());
  }
  if (height != 0 && (m.height() != height || m.width() != width)) {
    throw SpecError(field, "mask is " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                               ", image is " + std::to_string(height) + "x" + std::to_string(width));
  }
  return m;
}

Offset offset_from(const json& j) {
  if (!j.is_object()) throw SpecError("offset", "expected {dy, dx}");
  Offset o;
  for (const char* key : {"dy", "dx"}) {
    if (!j.contains(key)) continue;
    if (!j[key].is_number_integer()) throw SpecError(std::string("offset.") + key, "expected an integer");
  }
  o.dy = j.value("dy", 0);
  o.dx = j.value("dx", 0);
  return o;
}

void check_version(const json& j) {
  if (!j.is_object()) throw SpecError("spec", "expected a JSON object");
  if (!j.contains("v")) throw SpecError("v", "missing schema version");
  if (j["v"] != 1) throw SpecError("v", "unsupported schema version");
}

}  // namespace

nlohmann::json spec_to_json(const EditSpec& spec) {
  json j;
  j["v"] = 1;
  j["kind"] = std::string(to_string(spec.kind));
  j["height"] = spec.height;
  j["width"] = spec.width;
  j["m_gen"] = mask_to_base64_png(spec.m_gen);
  j["m_gud"] = mask_to_base64_png(spec.m_gud);
  j["m_share"] = mask_to_base64_png(spec.m_share);
  if (spec.m_ipt) j["m_ipt"] = mask_to_base64_png(*spec.m_ipt);
  if (spec.m_ref) j["m_ref"] = mask_to_base64_png(*spec.m_ref);
  json p;
  p["kind"] = to_string(spec.pairing.kind);
  p["gamma"] = spec.pairing.gamma;
  p["gen_anchor"] = {spec.pairing.gen_anchor_y, spec.pairing.gen_anchor_x};
  p["gud_anchor"] = {spec.pairing.gud_anchor_y, spec.pairing.gud_anchor_x};
  p["points"] = points_to_json(spec.pairing.points);
  j["pairing"] = p;
  j["similarity"] = to_string(spec.similarity);
  j["uses_reference_image"] = spec.uses_reference_image;
  if (spec.gamma) j["gamma"] = *spec.gamma;
  j["offset"] = {{"dy", spec.offset.dy}, {"dx", spec.offset.dx}};
  j["weights"] = weights_to_json(spec.weights);
  return j;
}

EditSpec spec_from_json(const nlohmann::json& j) {
  check_version(j);
  try {
    EditSpec spec;
    spec.kind = edit_kind_from(j.at("kind").get<std::string>());
    spec.height = j.at("height").get<std::size_t>();
    spec.width = j.at("width").get<std::size_t>();
    spec.m_gen = mask_field(j, "m_gen", spec.height, spec.width);
    spec.m_gud = mask_field(j, "m_gud", spec.height, spec.width);
    spec.m_share = mask_field(j, "m_share", spec.height, spec.width);
    if (j.contains("m_ipt")) spec.m_ipt = mask_field(j, "m_ipt", spec.height, spec.width);
    if (j.contains("m_ref")) spec.m_ref = mask_field(j, "m_ref", spec.height, spec.width);
    const json& p = j.at("pairing");
    spec.pairing.kind = pairing_kind_from(p.at("kind").get<std::string>());
    spec.pairing.gamma = p.at("gamma").get<double>();
    spec.pairing.gen_anchor_y = p.at("gen_anchor").at(0).get<double>();
    spec.pairing.gen_anchor_x = p.at("gen_anchor").at(1).get<double>();
    spec.pairing.gud_anchor_y = p.at("gud_anchor").at(0).get<double>();
    spec.pairing.gud_anchor_x = p.at("gud_anchor").at(1).get<double>();
    spec.pairing.points = points_from_json(p.at("points"));
    const std::string sim = j.at("similarity").get<std::string>();
    if (sim != "local" && sim != "global") throw SpecError("similarity", "expected local or global");
    spec.similarity = sim == "local" ? SimilarityMode::local : SimilarityMode::global;
    spec.uses_reference_image = j.at("uses_reference_image").get<bool>();
    if (j.contains("gamma")) spec.gamma = j["gamma"].get<double>();
    if (j.contains("offset")) spec.offset = offset_from(j["offset"]);
    if (j.contains("weights")) spec.weights = weights_from_json(j["weights"]);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw SpecError("spec", e.what());
  }
}

EditSpec spec_from_request(const nlohmann::json& r, std::size_t height, std::size_t width) {
  check_version(r);
  if (!r.contains("kind") || !r["kind"].is_string()) throw SpecError("kind", "missing");
  EditKind kind;
  try {
    kind = edit_kind_from(r["kind"].get<std::string>());
  } catch (const ContractError& e) {
    throw SpecError("kind", e.what());
  }
  auto optional_mask = [&](const char* field) -> std::optional<Mask> {
    if (!r.contains(field) || r[field].is_null()) return std::nullopt;
    return mask_field(r, field, height, width);
  };
  EditSpec spec;
  switch (kind) {
    case EditKind::moving: {
      if (!r.contains("offset")) throw SpecError("offset", "missing");
      spec = build_moving(mask_field(r, "object_mask", height, width), offset_from(r["offset"]),
                          optional_mask("reference_region"));
      break;
    }
    case EditKind::resizing: {
      if (!r.contains("scale") || !r["scale"].is_number()) throw SpecError("scale", "expected a number");
      const Offset off = r.contains("offset") ? offset_from(r["offset"]) : Offset{};
      spec = build_resizing(mask_field(r, "object_mask", height, width), r["scale"].get<double>(), off,
                            optional_mask("reference_region"));
      break;
    }
    case EditKind::replacing:
      spec = build_replacing(mask_field(r, "target_mask", height, width),
                             mask_field(r, "reference_mask", height, width));
      break;
    case EditKind::pasting:
      spec = build_pasting(mask_field(r, "reference_mask", height, width),
                           mask_field(r, "target_mask", height, width));
      break;
    case EditKind::dragging: {
      if (!r.contains("points")) throw SpecError("points", "missing");
      DragPointSet set{points_from_json(r["points"]), mask_field(r, "share_mask", height, width)};
      spec = build_dragging(set);
      break;
    }
  }
  if (r.contains("weights")) spec.weights = weights_from_json(r["weights"]);
  return spec;
}

}  // namespace featguide
