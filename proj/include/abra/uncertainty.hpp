#pragma once

#include <functional>
#include <vector>

#include "abra/rng.hpp"
#include "abra/tensor.hpp"

namespace abra {

// Learnable per-channel perturbation magnitudes bound to one backbone
// insertion site, plus the most recent standard-normal draws. The K
// buffers are per-site singletons shared by every batch of the run.
struct UncertaintySite {
  int site_id = 0;
  Tensor k_mu;     // C, learnable
  Tensor k_sigma;  // C, learnable
  std::vector<double> eps_mu;     // C, last draws
  std::vector<double> eps_sigma;  // C

  void init(int site, int channels);  // K initialized to zero
  void sample_noise(RngStream& rng);
};

// X_t = (sigma_c + dsigma) * (X - mu_c) / sigma_c + (mu_c + dmu) against
// the batch statistics of x, with dmu = eps_mu .* K_mu and
// dsigma = eps_sigma .* K_sigma. Computed in the rearranged form
// x + dsigma*(x-mu)/sigma + dmu so K = 0 reproduces x exactly.
// detach_k cuts gradient flow into K (descent phase).
Tensor abra_transform(const Tensor& x, const UncertaintySite& site,
                      bool detach_k = false);

struct AdvOptState {
  double step_size = 1e-3;
  int steps = 1;
  // trust region: after each step K is projected into [-k_clamp, k_clamp]
  // elementwise (0 disables). Unconstrained ascent compounds across
  // iterations and blows the loss up at this model scale.
  double k_clamp = 1.0;

  void validate() const;
};

struct AscentResult {
  std::vector<double> trace;  // L_adv per accepted step
  bool aborted = false;       // non-finite loss; K restored to entry values
};

// Gradient ascent on the K vectors of all sites: K <- K + alpha * dL/dK,
// applied `steps` times. `forward_loss` must rebuild the adversarial loss
// with the sites' current K live on the graph and every other parameter
// detached.
AscentResult adversarial_ascent(const std::vector<UncertaintySite*>& sites,
                                const std::function<Tensor()>& forward_loss,
                                const AdvOptState& opt);

}  // namespace abra
