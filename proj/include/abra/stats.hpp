#pragma once

#include "abra/tensor.hpp"

namespace abra {

// eps used inside every sqrt(var + eps) and as the clamp floor for
// standard deviations in AdaIN-style denominators.
inline constexpr double kStatsEps = 1e-5;

// Per-channel mean and biased variance over (n, h, w). Differentiable.
struct BatchStats {
  Tensor mu;      // C
  Tensor sigma2;  // C
};

// Per-instance, per-channel mean and biased variance over (h, w).
struct InstanceStats {
  Tensor mu;      // N x C
  Tensor sigma2;  // N x C
};

BatchStats batch_channel_stats(const Tensor& x);
InstanceStats instance_channel_stats(const Tensor& x);

// out = gamma * (x - mu) / sqrt(sigma2 + eps) + beta
Tensor bn_transform(const Tensor& x, const BatchStats& stats,
                    const Tensor& gamma, const Tensor& beta,
                    double eps = kStatsEps);

// AdaIN-style re-normalization against instance statistics:
//   out = (sigma_{n,c} + dsigma) * (x - mu_{n,c}) / sigma_{n,c} + (mu_{n,c} + dmu)
// computed in the rearranged form x + dsigma*(x-mu)/sigma + dmu so the
// zero-delta case is an exact identity. sigma clamped below at eps.
// delta_mu, delta_sigma: N x C.
Tensor adain_renormalize(const Tensor& x, const Tensor& delta_mu,
                         const Tensor& delta_sigma, double eps = kStatsEps);

// Elementwise max(v, eps) with pass-through gradient where v > eps.
Tensor clamp_min(const Tensor& v, double eps);

}  // namespace abra
