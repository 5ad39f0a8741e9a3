#include "featguide/attention_control.hpp"

#include "featguide/tensor.hpp"

namespace featguide {

std::string_view to_string(EditKind kind) {
  switch (kind) {
    case EditKind::moving: return "moving";
    case EditKind::resizing: return "resizing";
    case EditKind::replacing: return "replacing";
    case EditKind::pasting: return "pasting";
    case EditKind::dragging: return "dragging";
  }
  return "unknown";
}

EditKind edit_kind_from(std::string_view name) {
  for (EditKind k : {EditKind::moving, EditKind::resizing, EditKind::replacing, EditKind::pasting,
                     EditKind::dragging}) {
    if (to_string(k) == name) return k;
  }
  throw ContractError("unknown edit kind '" + std::string(name) + "'");
}

KVPlan build_kv_plan(const BankEntry& entry, EditKind kind) {
  if (!needs_reference(kind)) return KVPlan{KVMode::gud_only, entry.kv_gud};
  if (!entry.kv_ref) {
    throw ContractError(std::string(to_string(kind)) + " needs a memory bank built with a reference image");
  }
  KVPlan plan{KVMode::gud_concat_ref, {}};
  for (std::size_t s = 0; s < entry.kv_gud.sites.size(); ++s) {
    const AttentionSite& gud = entry.kv_gud.sites[s];
    const AttentionSite& ref = entry.kv_ref->sites.at(s);
    plan.record.sites.push_back(
        AttentionSite{concat_tokens(gud.keys, ref.keys), concat_tokens(gud.values, ref.values)});
  }
  return plan;
}

Tensor attend(const Tensor& q, const AttentionSite& site) { return softmax_attention(q, site.keys, site.values); }

}  // namespace featguide
