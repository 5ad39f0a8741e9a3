#include "featguide/ddim.hpp"

#include <cmath>

namespace featguide {

Tensor predict_x0(const Tensor& z, const Tensor& eps, double alpha) {
  require_same_shape(z, eps, "predict_x0");
  const double sa = std::sqrt(alpha), sb = std::sqrt(1.0 - alpha);
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - sb * eps[i]) / sa;
  return out;
}

Tensor ddim_transfer(const Tensor& z, const Tensor& eps, double alpha_from, double alpha_to) {
  require_same_shape(z, eps, "ddim_transfer");
  if (alpha_from == alpha_to) return z;
  const double sa_from = std::sqrt(alpha_from), sb_from = std::sqrt(1.0 - alpha_from);
  const double sa_to = std::sqrt(alpha_to), sb_to = std::sqrt(1.0 - alpha_to);
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x0 = (z[i] - sb_from * eps[i]) / sa_from;
    out[i] = sa_to * x0 + sb_to * eps[i];
  }
  return out;
}

}  // namespace featguide
