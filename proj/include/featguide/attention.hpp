#pragma once

#include <vector>

#include "featguide/tensor.hpp"

namespace featguide {

/// Keys and values of one self-attention site, stored pre-split per head:
/// both shaped [heads, tokens, head_dim].
struct AttentionSite {
  Tensor keys;
  Tensor values;

  std::size_t heads() const { return keys.dim(0); }
  std::size_t tokens() const { return keys.dim(1); }
  std::size_t head_dim() const { return keys.dim(2); }

  friend bool operator==(const AttentionSite&, const AttentionSite&) = default;
};

/// One entry per decoder self-attention site, ordered decoder layer 1..4.
struct AttentionRecord {
  std::vector<AttentionSite> sites;

  friend bool operator==(const AttentionRecord&, const AttentionRecord&) = default;
};

/// softmax(Q K^T / sqrt(d)) V evaluated per head.
/// q: [heads, n, d]; k, v: [heads, m, d]. Returns [heads, n, d].
/// When `weights` is non-null it receives the softmax matrix [heads, n, m].
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* weights = nullptr);

/// Concatenate two [heads, tokens, d] tensors along the token axis.
Tensor concat_tokens(const Tensor& a, const Tensor& b);

}  // namespace featguide
