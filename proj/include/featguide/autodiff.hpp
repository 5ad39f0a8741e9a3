#pragma once

#include <functional>
#include <span>
#include <vector>

#include "featguide/tensor.hpp"

// Minimal reverse-mode differentiation over Tensor values, sized for the
// reference denoiser. Parameters are plain Tensors held by the caller and
// never receive gradients; only tape inputs created with `input()` do.
namespace featguide::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  Var constant(Tensor value);
  Var input(Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulated at `v` by the last backward(); zero-shaped if none reached it.
  Tensor grad(Var v) const;

  struct Seed {
    Var var;
    const Tensor* cotangent;
  };
  /// Propagates the given output cotangents back to every node.
  void backward(std::span<const Seed> seeds);

  // Plumbing for op implementations.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;
  Var record(Tensor value, bool requires_grad, BackwardFn fn);
  Tensor& grad_slot(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// [C, H, W] convolution with a 3x3 kernel [Cout, Cin, 3, 3], zero padding 1.
Var conv3x3(Var x, const Tensor& weight, const Tensor& bias);
Var add(Var a, Var b);
Var add_channel_bias(Var x, std::span<const double> bias);
Var silu(Var x);
Var scale(Var x, double s);
Var avg_pool2(Var x);
Var upsample_nearest2(Var x);
Var concat_channels(Var a, Var b);

// Project [C, H, W] features with a [heads*d, C] matrix into [heads, H*W, d].
Var project_heads(Var x, const Tensor& weight, std::size_t heads);
// Project a constant token matrix [tokens, E] with [heads*d, E] into [heads, tokens, d].
Tensor project_tokens(const Tensor& tokens, const Tensor& weight, std::size_t heads);
// Merge [heads, H*W, d] back into [C, H, W] via a [C, heads*d] output matrix.
Var merge_heads(Var o, const Tensor& weight, std::size_t height, std::size_t width);
// softmax(q k^T / sqrt(d)) v per head; k/v may be constants.
Var attention(Var q, Var k, Var v);

}  // namespace featguide::ad
