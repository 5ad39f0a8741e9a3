#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "featguide/backend.hpp"
#include "featguide/edit_kind.hpp"
#include "featguide/masks.hpp"
#include "json.hpp"

namespace featguide {

/// Invalid edit request. `field` names the offending request field.
class SpecError : public ContractError {
 public:
  SpecError(std::string field, const std::string& message)
      : ContractError(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class SimilarityMode { local, global };
enum class PairingKind { identity, translation, scale, points };

/// Pixel coordinates, rows first.
struct PixelPoint {
  long y = 0;
  long x = 0;
  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

struct DragPair {
  PixelPoint source;
  PixelPoint target;
  friend bool operator==(const DragPair&, const DragPair&) = default;
};

struct DragPointSet {
  std::vector<DragPair> points;
  Mask share;
};

/// Correspondence between generated (edited) positions and guided positions.
/// Affine kinds map continuous pixel coordinates as
///   gud = gud_anchor + (gen - gen_anchor) / gamma
/// Point kind pairs 3x3 patches around each drag pair.
struct PairingMap {
  PairingKind kind = PairingKind::identity;
  double gamma = 1.0;
  double gen_anchor_y = 0.0;
  double gen_anchor_x = 0.0;
  double gud_anchor_y = 0.0;
  double gud_anchor_x = 0.0;
  std::vector<DragPair> points;

  bool affine() const { return kind != PairingKind::points; }
  /// Continuous guided coordinate for a continuous generated coordinate (affine kinds).
  std::array<double, 2> gud_coord(double gen_y, double gen_x) const;

  static PairingMap translation(Offset offset);

  friend bool operator==(const PairingMap&, const PairingMap&) = default;
};

/// Per-request weight overrides; unset entries keep the task defaults.
struct WeightOverrides {
  std::optional<double> w_edit;
  std::optional<double> w_content;
  std::optional<double> w_opt;
  std::optional<double> w_inpaint;
  friend bool operator==(const WeightOverrides&, const WeightOverrides&) = default;
};

struct EditSpec {
  EditKind kind = EditKind::moving;
  std::size_t height = 0;
  std::size_t width = 0;
  Mask m_gen;
  Mask m_gud;
  Mask m_share;
  std::optional<Mask> m_ipt;
  std::optional<Mask> m_ref;
  PairingMap pairing;
  SimilarityMode similarity = SimilarityMode::local;
  bool uses_reference_image = false;
  std::optional<double> gamma;
  Offset offset;
  WeightOverrides weights;

  /// Only moving and resizing carry the inpainting term.
  bool has_opt_term() const { return kind == EditKind::moving || kind == EditKind::resizing; }

  friend bool operator==(const EditSpec&, const EditSpec&) = default;
};

/// Radius of the default reference ring around the inpainting region.
inline constexpr std::size_t kReferenceRing = 2;

EditSpec build_moving(const Mask& object_mask, Offset offset, const std::optional<Mask>& reference_region = {});
EditSpec build_resizing(const Mask& object_mask, double gamma, Offset offset = {},
                        const std::optional<Mask>& reference_region = {});
EditSpec build_replacing(const Mask& m_gen_object, const Mask& m_gud_reference);
EditSpec build_pasting(const Mask& m_gud_in_reference, const Mask& m_gen_target);
EditSpec build_dragging(const DragPointSet& points);

/// 3x3 patch pairs around each drag point on an h x w grid. A patch cell is
/// kept only when both its source and target copies are inside the grid.
struct PatchPair {
  std::size_t gen_y, gen_x, gud_y, gud_x;
  friend bool operator==(const PatchPair&, const PatchPair&) = default;
};
std::vector<PatchPair> drag_patch_pairs(const std::vector<DragPair>& points, std::size_t height, std::size_t width,
                                        std::size_t scale);

/// Generated cell paired with a continuous guided coordinate (cell centers at i + 0.5).
struct CellPair {
  std::size_t gen_y = 0;
  std::size_t gen_x = 0;
  double gud_y = 0.0;
  double gud_x = 0.0;
};

/// Masks and pairs of one decoder layer at its feature resolution.
struct LayerMasks {
  std::size_t layer = 0;  // 1-based
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t scale = 1;
  Mask gen, gud, share, ipt, ref;
  /// Editing pairs for local similarity; empty in global mode.
  std::vector<CellPair> pairs;
  /// Names of masks non-empty at full resolution but empty here.
  std::vector<std::string> emptied;
};

std::array<LayerMasks, kDecoderLayers> downsample_masks(const EditSpec& spec, const BackendProfile& profile);

/// Guided features warped onto the generated grid through an affine pairing;
/// cells whose guided coordinate falls outside the grid are zero.
Tensor resample_guided(const Tensor& f_gud, const PairingMap& pairing, std::size_t scale);

nlohmann::json spec_to_json(const EditSpec& spec);
EditSpec spec_from_json(const nlohmann::json& j);

/// Builds a spec from a user request:
///   {"v":1,"kind":"moving","object_mask":<b64 png>,"offset":{"dy":0,"dx":3},"reference_region":<b64>?}
///   {"v":1,"kind":"resizing","object_mask":..,"scale":2.0,"offset":..?,"reference_region":..?}
///   {"v":1,"kind":"replacing","target_mask":..,"reference_mask":..}
///   {"v":1,"kind":"pasting","reference_mask":..,"target_mask":..}
///   {"v":1,"kind":"dragging","points":[{"source":[x,y],"target":[x,y]}],"share_mask":..}
/// plus optional "weights":{"w_e","w_c","w_o","w_i"}. Throws SpecError.
EditSpec spec_from_request(const nlohmann::json& request, std::size_t height, std::size_t width);

}  // namespace featguide
