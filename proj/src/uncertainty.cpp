#include "abra/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "abra/stats.hpp"

namespace abra {

void UncertaintySite::init(int site, int channels) {
  site_id = site;
  k_mu = Tensor::zeros({channels}, /*requires_grad=*/true);
  k_sigma = Tensor::zeros({channels}, /*requires_grad=*/true);
  eps_mu.assign(static_cast<std::size_t>(channels), 0.0);
  eps_sigma.assign(static_cast<std::size_t>(channels), 0.0);
}

void UncertaintySite::sample_noise(RngStream& rng) {
  for (auto& e : eps_mu) e = rng.normal();
  for (auto& e : eps_sigma) e = rng.normal();
}

Tensor abra_transform(const Tensor& x, const UncertaintySite& site,
                      bool detach_k) {
  if (x.ndim() != 4 || x.dim(1) != site.k_mu.dim(0))
    throw std::invalid_argument(
        "abra_transform: channel count " + shape_str(x.shape()) +
        " does not match site K length " + shape_str(site.k_mu.shape()));
  const std::int64_t C = site.k_mu.dim(0);
  Tensor emu = Tensor::from_data({C}, site.eps_mu);
  Tensor esig = Tensor::from_data({C}, site.eps_sigma);
  Tensor kmu = detach_k ? site.k_mu.detach() : site.k_mu;
  Tensor ksig = detach_k ? site.k_sigma.detach() : site.k_sigma;
  Tensor delta_mu = mul(emu, kmu);
  Tensor delta_sigma = mul(esig, ksig);

  BatchStats st = batch_channel_stats(x);
  Tensor sigma = clamp_min(sqrt_t(st.sigma2), kStatsEps);
  Tensor scaled = chan_mul(chan_div(chan_sub(x, st.mu), sigma), delta_sigma);
  return chan_add(add(x, scaled), delta_mu);
}

void AdvOptState::validate() const {
  if (step_size < 0.0)
    throw std::invalid_argument("AdvOptState: step_size must be nonnegative");
  if (steps < 1)
    throw std::invalid_argument("AdvOptState: steps must be >= 1");
  if (k_clamp < 0.0)
    throw std::invalid_argument("AdvOptState: k_clamp must be nonnegative");
}

AscentResult adversarial_ascent(const std::vector<UncertaintySite*>& sites,
                                const std::function<Tensor()>& forward_loss,
                                const AdvOptState& opt) {
  opt.validate();
  AscentResult res;

  std::vector<std::vector<double>> snap_mu, snap_sigma;
  for (auto* s : sites) {
    snap_mu.push_back(s->k_mu.data());
    snap_sigma.push_back(s->k_sigma.data());
  }

  for (int step = 0; step < opt.steps; ++step) {
    for (auto* s : sites) {
      s->k_mu.zero_grad();
      s->k_sigma.zero_grad();
    }
    Tensor loss = forward_loss();
    if (!std::isfinite(loss.item())) {
      for (std::size_t i = 0; i < sites.size(); ++i) {
        sites[i]->k_mu.data() = snap_mu[i];
        sites[i]->k_sigma.data() = snap_sigma[i];
      }
      res.aborted = true;
      return res;
    }
    backward(loss);
    auto project = [&opt](double v) {
      if (opt.k_clamp <= 0.0) return v;
      return std::clamp(v, -opt.k_clamp, opt.k_clamp);
    };
    for (auto* s : sites) {
      for (std::size_t c = 0; c < s->k_mu.data().size(); ++c)
        s->k_mu.data()[c] =
            project(s->k_mu.data()[c] + opt.step_size * s->k_mu.grad()[c]);
      for (std::size_t c = 0; c < s->k_sigma.data().size(); ++c)
        s->k_sigma.data()[c] =
            project(s->k_sigma.data()[c] + opt.step_size * s->k_sigma.grad()[c]);
    }
    res.trace.push_back(loss.item());
  }
  return res;
}

}  // namespace abra
