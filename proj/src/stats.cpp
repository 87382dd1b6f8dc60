#include "abra/stats.hpp"

#include <stdexcept>

namespace abra {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tensor clamp_min(const Tensor& v, double eps) {
  std::vector<double> out(v.data().size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = v.data()[i] < eps ? eps : v.data()[i];
  Tensor c = Tensor::from_data(v.shape(), std::move(out));
  if (!v.requires_grad() && v.node()->parents.empty()) return c;
  // keep gradient flow through unclamped entries
  Tensor mask = Tensor::zeros(v.shape());
  for (std::size_t i = 0; i < mask.data().size(); ++i)
    mask.data()[i] = v.data()[i] < eps ? 0.0 : 1.0;
  return add(mul(v, mask), mul(c, sub(Tensor::full(v.shape(), 1.0), mask)));
}

BatchStats batch_channel_stats(const Tensor& x) {
  require(x.ndim() == 4,
          "batch_channel_stats: expects NCHW, got " + shape_str(x.shape()));
  require(x.dim(0) * x.dim(2) * x.dim(3) >= 1, "batch_channel_stats: empty batch");
  Tensor mu = channel_mean(x);
  Tensor centered = chan_sub(x, mu);
  Tensor sigma2 = channel_mean(mul(centered, centered));
  return {mu, sigma2};
}

InstanceStats instance_channel_stats(const Tensor& x) {
  require(x.ndim() == 4,
          "instance_channel_stats: expects NCHW, got " + shape_str(x.shape()));
  require(x.dim(2) * x.dim(3) >= 1, "instance_channel_stats: empty spatial extent");
  Tensor mu = instance_mean(x);
  Tensor centered = inst_sub(x, mu);
  Tensor sigma2 = instance_mean(mul(centered, centered));
  return {mu, sigma2};
}

Tensor bn_transform(const Tensor& x, const BatchStats& stats,
                    const Tensor& gamma, const Tensor& beta, double eps) {
  Tensor denom = sqrt_t(add_scalar(stats.sigma2, eps));
  Tensor norm = chan_div(chan_sub(x, stats.mu), denom);
  return chan_add(chan_mul(norm, gamma), beta);
}

Tensor adain_renormalize(const Tensor& x, const Tensor& delta_mu,
                         const Tensor& delta_sigma, double eps) {
  InstanceStats st = instance_channel_stats(x);
  Tensor sigma = clamp_min(sqrt_t(st.sigma2), eps);
  Tensor scaled = inst_mul(inst_div(inst_sub(x, st.mu), sigma), delta_sigma);
  return inst_add(add(x, scaled), delta_mu);
}

}  // namespace abra
