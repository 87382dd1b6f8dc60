#include "abra/model.hpp"

#include <cmath>
#include <stdexcept>

namespace abra {

void BackboneConfig::validate() const {
  if (blocks.empty())
    throw std::invalid_argument("BackboneConfig: blocks must be non-empty");
  if (feature_dim < 1)
    throw std::invalid_argument("BackboneConfig: feature_dim must be >= 1");
  if (num_classes < 2)
    throw std::invalid_argument("BackboneConfig: num_classes must be >= 2");
  if (in_channels < 1)
    throw std::invalid_argument("BackboneConfig: in_channels must be >= 1");
}

void BatchNorm::init(int channels) {
  gamma = Tensor::full({channels}, 1.0, /*requires_grad=*/true);
  beta = Tensor::zeros({channels}, /*requires_grad=*/true);
  running_mu.assign(static_cast<std::size_t>(channels), 0.0);
  running_var.assign(static_cast<std::size_t>(channels), 1.0);
}

Tensor BatchNorm::forward(const Tensor& x, BnMode mode, bool detach_params,
                          const BatchStats* external, BatchStats* captured) {
  const Tensor g = detach_params ? gamma.detach() : gamma;
  const Tensor b = detach_params ? beta.detach() : beta;
  if (external) {
    if (captured) *captured = *external;
    return bn_transform(x, *external, g, b);
  }
  if (mode == BnMode::Eval) {
    BatchStats st{Tensor::from_data({static_cast<std::int64_t>(running_mu.size())}, running_mu),
                  Tensor::from_data({static_cast<std::int64_t>(running_var.size())}, running_var)};
    if (captured) *captured = st;
    return bn_transform(x, st, g, b);
  }
  BatchStats st = batch_channel_stats(x);
  if (captured) *captured = st;
  if (mode == BnMode::Train) {
    for (std::size_t c = 0; c < running_mu.size(); ++c) {
      running_mu[c] = (1.0 - momentum) * running_mu[c] + momentum * st.mu.data()[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * st.sigma2.data()[c];
    }
  } else if (mode == BnMode::Recalibrate) {
    running_mu = st.mu.data();
    running_var = st.sigma2.data();
  }
  return bn_transform(x, st, g, b);
}

void ConvBlock::init(int in_channels, int out_channels, bool down,
                     RngStream& rng) {
  downsample = down;
  const int fan_in = in_channels * 9;
  const double std = std::sqrt(2.0 / fan_in);
  std::vector<double> w(static_cast<std::size_t>(out_channels) * in_channels * 9);
  for (auto& v : w) v = rng.normal(0.0, std);
  weight = Tensor::from_data({out_channels, in_channels, 3, 3}, std::move(w),
                             /*requires_grad=*/true);
  bn.init(out_channels);
}

Tensor ConvBlock::forward(const Tensor& x, BnMode mode, bool detach_params,
                          const BatchStats* external, BatchStats* captured) {
  Tensor y = conv2d(x, detach_params ? weight.detach() : weight, 1, 1);
  y = bn.forward(y, mode, detach_params, external, captured);
  y = relu(y);
  if (downsample) y = avg_pool2(y);
  return y;
}

void Backbone::init(RngStream& rng) {
  blocks_.clear();
  int in = cfg_.in_channels;
  for (const auto& b : cfg_.blocks) {
    ConvBlock cb;
    cb.init(in, b.out_channels, b.downsample, rng);
    blocks_.push_back(std::move(cb));
    in = b.out_channels;
  }
  const int c_last = cfg_.blocks.back().out_channels;
  auto init_linear = [&rng](int out, int in_dim) {
    const double std = std::sqrt(1.0 / in_dim);
    std::vector<double> w(static_cast<std::size_t>(out) * in_dim);
    for (auto& v : w) v = rng.normal(0.0, std);
    return Tensor::from_data({out, in_dim}, std::move(w), /*requires_grad=*/true);
  };
  feat_w_ = init_linear(cfg_.feature_dim, c_last);
  feat_b_ = Tensor::zeros({cfg_.feature_dim}, true);
  cls_w_ = init_linear(cfg_.num_classes, cfg_.feature_dim);
  cls_b_ = Tensor::zeros({cfg_.num_classes}, true);
}

Tensor Backbone::run_blocks(const Tensor& x, int begin, int end, BnMode mode,
                            bool detach_params) {
  Tensor y = x;
  for (int i = begin; i < end; ++i)
    y = blocks_[static_cast<std::size_t>(i)].forward(y, mode, detach_params);
  return y;
}

Heads Backbone::run_heads(const Tensor& features, bool detach_params) {
  Heads h;
  Tensor pooled = global_avg_pool(features);
  const Tensor fw = detach_params ? feat_w_.detach() : feat_w_;
  const Tensor fb = detach_params ? feat_b_.detach() : feat_b_;
  const Tensor cw = detach_params ? cls_w_.detach() : cls_w_;
  const Tensor cb = detach_params ? cls_b_.detach() : cls_b_;
  h.embedding = linear(pooled, fw, fb);
  h.logits = linear(h.embedding, cw, cb);
  h.cosphi = cosine_rows(h.embedding, cw);
  return h;
}

Heads Backbone::forward(const Tensor& images, const std::set<int>& active_sites,
                        const SiteHook& hook, BnMode mode, bool detach_params,
                        std::vector<BatchStats>* capture,
                        const std::vector<BatchStats>* external) {
  if (images.ndim() != 4 || images.dim(1) != cfg_.in_channels)
    throw std::invalid_argument(
        "backbone_forward: input channels " +
        (images.ndim() == 4 ? std::to_string(images.dim(1)) : shape_str(images.shape())) +
        " do not match config in_channels " + std::to_string(cfg_.in_channels));
  if (capture) capture->assign(static_cast<std::size_t>(num_blocks()), {});
  Tensor y = images;
  for (int i = 0; i < num_blocks(); ++i) {
    const auto idx = static_cast<std::size_t>(i);
    y = blocks_[idx].forward(y, mode, detach_params,
                             external ? &(*external)[idx] : nullptr,
                             capture ? &(*capture)[idx] : nullptr);
    if (hook && active_sites.count(i)) y = hook(y, i);
  }
  return run_heads(y, detach_params);
}

std::pair<Heads, Heads> Backbone::forward_dual(const Tensor& images,
                                               const std::set<int>& active_sites,
                                               const SiteHook& transform,
                                               BnMode clean_mode) {
  if (images.ndim() != 4 || images.dim(1) != cfg_.in_channels)
    throw std::invalid_argument("forward_dual: input channel mismatch");
  Tensor clean = images;
  Tensor pert;
  bool branched = false;
  for (int i = 0; i < num_blocks(); ++i) {
    auto& blk = blocks_[static_cast<std::size_t>(i)];
    BatchStats clean_stats;
    clean = blk.forward(clean, clean_mode, false, nullptr, &clean_stats);
    if (branched) pert = blk.forward(pert, BnMode::Frozen, false, &clean_stats);
    if (active_sites.count(i)) {
      pert = transform(branched ? pert : clean, i);
      branched = true;
    }
  }
  Heads hc = run_heads(clean, false);
  Heads hp = branched ? run_heads(pert, false) : hc;
  return {hc, hp};
}

std::vector<Param> Backbone::parameters() {
  std::vector<Param> ps;
  for (int i = 0; i < num_blocks(); ++i) {
    auto& b = blocks_[static_cast<std::size_t>(i)];
    const std::string prefix = "block" + std::to_string(i);
    ps.push_back({prefix + ".conv.weight", b.weight, false});
    ps.push_back({prefix + ".bn.gamma", b.bn.gamma, false});
    ps.push_back({prefix + ".bn.beta", b.bn.beta, false});
  }
  ps.push_back({"feat.weight", feat_w_, false});
  ps.push_back({"feat.bias", feat_b_, false});
  ps.push_back({"cls.weight", cls_w_, false});
  ps.push_back({"cls.bias", cls_b_, false});
  return ps;
}

Tensor arcface_angles(const Tensor& embedding, const Tensor& class_weights) {
  return cosine_rows(embedding, class_weights);
}

bool adabn_recalibrate(Backbone& model, const Tensor& batch) {
  model.forward(batch, {}, nullptr, BnMode::Recalibrate);
  return batch.dim(0) >= 2;
}

}  // namespace abra
