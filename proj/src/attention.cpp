#include "featguide/attention.hpp"

#include <algorithm>
#include <cmath>

namespace featguide {

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* weights) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw ContractError("attention: tensors must be rank 3");
  if (k.shape() != v.shape()) throw ContractError("attention: key/value shape mismatch");
  if (q.dim(0) != k.dim(0)) throw ContractError("attention: head count mismatch");
  if (q.dim(2) != k.dim(2)) {
    throw ContractError("attention: query dim " + std::to_string(q.dim(2)) + " does not match key dim " +
                        std::to_string(k.dim(2)));
  }
  const std::size_t heads = q.dim(0), n = q.dim(1), m = k.dim(1), d = q.dim(2);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor out({heads, n, d});
  if (weights) *weights = Tensor({heads, n, m});
  std::vector<double> row(m);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      double row_max = -INFINITY;
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += q.at(h, i, c) * k.at(h, j, c);
        row[j] = s * inv_sqrt_d;
        row_max = std::max(row_max, row[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        row[j] = std::exp(row[j] - row_max);
        total += row[j];
      }
      for (std::size_t j = 0; j < m; ++j) {
        const double p = row[j] / total;
        if (weights) weights->at(h, i, j) = p;
        for (std::size_t c = 0; c < d; ++c) out.at(h, i, c) += p * v.at(h, j, c);
      }
    }
  }
  return out;
}

Tensor concat_tokens(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw ContractError("concat_tokens: incompatible shapes " + shape_string(a.shape()) + " and " +
                        shape_string(b.shape()));
  }
  const std::size_t heads = a.dim(0), na = a.dim(1), nb = b.dim(1), d = a.dim(2);
  Tensor out({heads, na + nb, d});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t c = 0; c < d; ++c) out.at(h, i, c) = a.at(h, i, c);
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t c = 0; c < d; ++c) out.at(h, na + i, c) = b.at(h, i, c);
  }
  return out;
}

}  // namespace featguide
