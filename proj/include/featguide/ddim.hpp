#pragma once

#include "featguide/backend.hpp"

namespace featguide {

/// Deterministic DDIM transfer of `z` from noise level alpha_from to alpha_to
/// given the noise estimate `eps`:
///   x0 = (z - sqrt(1 - a_from) eps) / sqrt(a_from)
///   z' = sqrt(a_to) x0 + sqrt(1 - a_to) eps
/// Sampling moves to a larger alpha_bar, inversion to a smaller one.
Tensor ddim_transfer(const Tensor& z, const Tensor& eps, double alpha_from, double alpha_to);

/// Predicted clean latent x0 for noise level alpha.
Tensor predict_x0(const Tensor& z, const Tensor& eps, double alpha);

}  // namespace featguide
