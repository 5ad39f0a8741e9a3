#include "featguide/autodiff.hpp"

#include <cmath>

#include "featguide/attention.hpp"

namespace featguide::ad {

Var Tape::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Tape::input(Tensor value) { return record(std::move(value), true, nullptr); }

Var Tape::record(Tensor value, bool requires_grad, BackwardFn fn) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, requires_grad ? std::move(fn) : nullptr});
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_slot(Var v) {
  Node& node = nodes_[v.id];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape());
  return node.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id];
  return node.grad.empty() ? Tensor(node.value.shape()) : node.grad;
}

void Tape::backward(std::span<const Seed> seeds) {
  for (Node& node : nodes_) node.grad = Tensor{};
  for (const Seed& seed : seeds) {
    if (!nodes_[seed.var.id].requires_grad) continue;
    require_same_shape(nodes_[seed.var.id].value, *seed.cotangent, "backward seed");
    grad_slot(seed.var) += *seed.cotangent;
  }
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (node.backward && !node.grad.empty()) node.backward(*this, node.grad);
  }
}

namespace {

bool any_grad(Var a) { return a.tape->requires_grad(a); }
bool any_grad(Var a, Var b) { return a.tape->requires_grad(a) || b.tape->requires_grad(b); }

}  // namespace

Var conv3x3(Var x, const Tensor& weight, const Tensor& bias) {
  Tape& tape = *x.tape;
  const Tensor& in = tape.value(x);
  const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2), cout = weight.dim(0);
  if (weight.dim(1) != cin) throw ContractError("conv3x3: channel mismatch");
  Tensor out({cout, h, w});
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out.at(o, y, xx) = bias[o];
    for (std::size_t i = 0; i < cin; ++i) {
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const double wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
              out.at(o, y, xx) += wv * in.at(i, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
            }
          }
        }
      }
    }
  }
  const Tensor* wp = &weight;
  return tape.record(std::move(out), any_grad(x), [x, wp, cin, cout, h, w](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_slot(x);
    const Tensor& weight = *wp;
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t i = 0; i < cin; ++i) {
        for (std::size_t ky = 0; ky < 3; ++ky) {
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const double wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
            for (std::size_t y = 0; y < h; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t xx = 0; xx < w; ++xx) {
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                dx.at(i, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) += wv * g.at(o, y, xx);
              }
            }
          }
        }
      }
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = *a.tape;
  Tensor out = tape.value(a) + tape.value(b);
  return tape.record(std::move(out), any_grad(a, b), [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.grad_slot(a) += g;
    if (t.requires_grad(b)) t.grad_slot(b) += g;
  });
}

Var add_channel_bias(Var x, std::span<const double> bias) {
  Tape& tape = *x.tape;
  Tensor out = tape.value(x);
  const std::size_t c = out.dim(0), plane = out.size() / c;
  if (bias.size() != c) throw ContractError("add_channel_bias: channel mismatch");
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t p = 0; p < plane; ++p) out[i * plane + p] += bias[i];
  return tape.record(std::move(out), any_grad(x), [x](Tape& t, const Tensor& g) { t.grad_slot(x) += g; });
}

Var silu(Var x) {
  Tape& tape = *x.tape;
  const Tensor& in = tape.value(x);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] / (1.0 + std::exp(-in[i]));
  return tape.record(std::move(out), any_grad(x), [x](Tape& t, const Tensor& g) {
    const Tensor& in = t.value(x);
    Tensor& dx = t.grad_slot(x);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-in[i]));
      dx[i] += g[i] * s * (1.0 + in[i] * (1.0 - s));
    }
  });
}

Var scale(Var x, double s) {
  Tape& tape = *x.tape;
  Tensor out = tape.value(x) * s;
  return tape.record(std::move(out), any_grad(x), [x, s](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += s * g[i];
  });
}

Var avg_pool2(Var x) {
  Tape& tape = *x.tape;
  const Tensor& in = tape.value(x);
  const std::size_t c = in.dim(0), h = in.dim(1) / 2, w = in.dim(2) / 2;
  Tensor out({c, h, w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out.at(k, y, xx) = 0.25 * (in.at(k, 2 * y, 2 * xx) + in.at(k, 2 * y, 2 * xx + 1) +
                                   in.at(k, 2 * y + 1, 2 * xx) + in.at(k, 2 * y + 1, 2 * xx + 1));
  return tape.record(std::move(out), any_grad(x), [x, c, h, w](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_slot(x);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double q = 0.25 * g.at(k, y, xx);
          dx.at(k, 2 * y, 2 * xx) += q;
          dx.at(k, 2 * y, 2 * xx + 1) += q;
          dx.at(k, 2 * y + 1, 2 * xx) += q;
          dx.at(k, 2 * y + 1, 2 * xx + 1) += q;
        }
  });
}

Var upsample_nearest2(Var x) {
  Tape& tape = *x.tape;
  const Tensor& in = tape.value(x);
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out.at(k, y, xx) = in.at(k, y / 2, xx / 2);
  return tape.record(std::move(out), any_grad(x), [x, c, h, w](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_slot(x);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx) dx.at(k, y / 2, xx / 2) += g.at(k, y, xx);
  });
}

Var concat_channels(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  if (ta.dim(1) != tb.dim(1) || ta.dim(2) != tb.dim(2)) throw ContractError("concat_channels: spatial mismatch");
  Tensor out({ta.dim(0) + tb.dim(0), ta.dim(1), ta.dim(2)});
  std::copy(ta.values().begin(), ta.values().end(), out.values().begin());
  std::copy(tb.values().begin(), tb.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(ta.size()));
  const std::size_t split = ta.size();
  return tape.record(std::move(out), any_grad(a, b), [a, b, split](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& da = t.grad_slot(a);
      for (std::size_t i = 0; i < split; ++i) da[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& db = t.grad_slot(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[split + i];
    }
  });
}

Var project_heads(Var x, const Tensor& weight, std::size_t heads) {
  Tape& tape = *x.tape;
  const Tensor& in = tape.value(x);
  const std::size_t c = in.dim(0), n = in.dim(1) * in.dim(2), rows = weight.dim(0);
  const std::size_t d = rows / heads;
  if (weight.dim(1) != c || d * heads != rows) throw ContractError("project_heads: weight shape mismatch");
  Tensor out({heads, n, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < d; ++j) {
      const double* wrow = weight.data() + (h * d + j) * c;
      for (std::size_t k = 0; k < c; ++k) {
        const double wv = wrow[k];
        const double* plane = in.data() + k * n;
        for (std::size_t p = 0; p < n; ++p) out.at(h, p, j) += wv * plane[p];
      }
    }
  const Tensor* wp = &weight;
  return tape.record(std::move(out), any_grad(x), [x, wp, heads, c, n, d](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_slot(x);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < d; ++j) {
        const double* wrow = wp->data() + (h * d + j) * c;
        for (std::size_t k = 0; k < c; ++k) {
          const double wv = wrow[k];
          double* plane = dx.data() + k * n;
          for (std::size_t p = 0; p < n; ++p) plane[p] += wv * g.at(h, p, j);
        }
      }
  });
}

Tensor project_tokens(const Tensor& tokens, const Tensor& weight, std::size_t heads) {
  const std::size_t m = tokens.dim(0), e = tokens.dim(1), rows = weight.dim(0);
  const std::size_t d = rows / heads;
  if (weight.dim(1) != e || d * heads != rows) throw ContractError("project_tokens: weight shape mismatch");
  Tensor out({heads, m, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < e; ++k) s += weight[(h * d + j) * e + k] * tokens[i * e + k];
        out.at(h, i, j) = s;
      }
  return out;
}

Var merge_heads(Var o, const Tensor& weight, std::size_t height, std::size_t width) {
  Tape& tape = *o.tape;
  const Tensor& in = tape.value(o);
  const std::size_t heads = in.dim(0), n = in.dim(1), d = in.dim(2), c = weight.dim(0);
  if (weight.dim(1) != heads * d || n != height * width) throw ContractError("merge_heads: shape mismatch");
  Tensor out({c, height, width});
  for (std::size_t k = 0; k < c; ++k) {
    double* plane = out.data() + k * n;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < d; ++j) {
        const double wv = weight[k * heads * d + h * d + j];
        for (std::size_t p = 0; p < n; ++p) plane[p] += wv * in.at(h, p, j);
      }
  }
  const Tensor* wp = &weight;
  return tape.record(std::move(out), any_grad(o), [o, wp, heads, n, d, c](Tape& t, const Tensor& g) {
    Tensor& dout = t.grad_slot(o);
    for (std::size_t k = 0; k < c; ++k) {
      const double* plane = g.data() + k * n;
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < d; ++j) {
          const double wv = (*wp)[k * heads * d + h * d + j];
          for (std::size_t p = 0; p < n; ++p) dout.at(h, p, j) += wv * plane[p];
        }
    }
  });
}

Var attention(Var q, Var k, Var v) {
  Tape& tape = *q.tape;
  Tensor weights;
  Tensor out = softmax_attention(tape.value(q), tape.value(k), tape.value(v), &weights);
  const bool needs = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v);
  return tape.record(std::move(out), needs, [q, k, v, weights](Tape& t, const Tensor& g) {
    const Tensor& tq = t.value(q);
    const Tensor& tk = t.value(k);
    const Tensor& tv = t.value(v);
    const std::size_t heads = tq.dim(0), n = tq.dim(1), m = tk.dim(1), d = tq.dim(2);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
    std::vector<double> dp(m);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        double row_dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < d; ++c) s += g.at(h, i, c) * tv.at(h, j, c);
          dp[j] = s;
          row_dot += s * weights.at(h, i, j);
        }
        for (std::size_t j = 0; j < m; ++j) {
          const double p = weights.at(h, i, j);
          if (gv) {
            Tensor& dv = t.grad_slot(v);
            for (std::size_t c = 0; c < d; ++c) dv.at(h, j, c) += p * g.at(h, i, c);
          }
          const double ds = p * (dp[j] - row_dot) * inv_sqrt_d;
          if (gq) {
            Tensor& dq = t.grad_slot(q);
            for (std::size_t c = 0; c < d; ++c) dq.at(h, i, c) += ds * tk.at(h, j, c);
          }
          if (gk) {
            Tensor& dk = t.grad_slot(k);
            for (std::size_t c = 0; c < d; ++c) dk.at(h, j, c) += ds * tq.at(h, i, c);
          }
        }
      }
    }
  });
}

}  // namespace featguide::ad
