#pragma once

#include "featguide/attention.hpp"
#include "featguide/edit_kind.hpp"
#include "featguide/inversion.hpp"

namespace featguide {

enum class KVMode { gud_only, gud_concat_ref };

/// Keys/values substituted into every decoder self-attention site for one step.
struct KVPlan {
  KVMode mode = KVMode::gud_only;
  AttentionRecord record;
};

/// Moving, resizing and dragging attend to the guided image only; replacing and
/// pasting concatenate guided and reference tokens. Throws ContractError when
/// the task needs a reference the entry does not carry.
KVPlan build_kv_plan(const BankEntry& entry, EditKind kind);

/// softmax(Q K^T / sqrt(d)) V against one planned site. q: [heads, n, d].
Tensor attend(const Tensor& q, const AttentionSite& site);

}  // namespace featguide
