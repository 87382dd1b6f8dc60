#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "abra/rng.hpp"
#include "abra/stats.hpp"
#include "abra/tensor.hpp"

namespace abra {

struct BlockConfig {
  int out_channels = 16;
  bool downsample = true;
};

struct BackboneConfig {
  int in_channels = 3;
  std::vector<BlockConfig> blocks = {{16, true}, {32, true}, {64, true}};
  int feature_dim = 64;
  int num_classes = 10;

  void validate() const;
};

// How batch-norm layers source their statistics during a forward pass.
//   Train        batch stats, running stats EMA-updated (momentum 0.1)
//   Frozen       batch stats, running stats untouched (perturbed branch,
//                adversarial phase)
//   Eval         running stats
//   Recalibrate  batch stats, running stats replaced by them
enum class BnMode { Train, Frozen, Eval, Recalibrate };

struct BatchNorm {
  Tensor gamma, beta;  // C, learnable
  std::vector<double> running_mu, running_var;
  double momentum = 0.1;

  void init(int channels);
  // external: normalize with the given statistics instead of this input's
  // batch statistics (running stats untouched). captured: receives the
  // statistics actually used.
  Tensor forward(const Tensor& x, BnMode mode, bool detach_params,
                 const BatchStats* external = nullptr,
                 BatchStats* captured = nullptr);
};

struct ConvBlock {
  Tensor weight;  // out x in x 3 x 3
  BatchNorm bn;
  bool downsample = true;

  void init(int in_channels, int out_channels, bool down, RngStream& rng);
  Tensor forward(const Tensor& x, BnMode mode, bool detach_params,
                 const BatchStats* external = nullptr,
                 BatchStats* captured = nullptr);
};

struct Param {
  std::string name;
  Tensor tensor;
  bool no_decay = false;
};

// Feature map hook applied after a block; site is the block index.
using SiteHook = std::function<Tensor(const Tensor&, int site)>;

struct Heads {
  Tensor embedding;  // N x feature_dim
  Tensor logits;     // N x num_classes
  Tensor cosphi;     // N x num_classes
};

// Block-structured conv backbone with named insertion points after each
// block, a linear feature head and a classifier whose weight rows double
// as the angular-loss class directions.
class Backbone {
 public:
  Backbone() = default;
  explicit Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  void init(RngStream& rng);

  // capture: per-block batch statistics used by this pass. external: BN
  // layers normalize with these statistics instead of their own input's
  // (the stat-mismatch regime the perturbed training branch runs in).
  Heads forward(const Tensor& images, const std::set<int>& active_sites,
                const SiteHook& hook, BnMode mode, bool detach_params = false,
                std::vector<BatchStats>* capture = nullptr,
                const std::vector<BatchStats>* external = nullptr);

  // Clean and perturbed branches in one pass; the computation is shared up
  // to the first active site. The clean branch runs with `clean_mode`; the
  // perturbed branch normalizes every BN layer with the clean branch's
  // batch statistics (never touching running stats), so a zero perturbation
  // reproduces the clean branch exactly while a live one is processed under
  // the same statistic mismatch that inference under shift produces.
  std::pair<Heads, Heads> forward_dual(const Tensor& images,
                                       const std::set<int>& active_sites,
                                       const SiteHook& transform,
                                       BnMode clean_mode);

  // pieces used by the adversarial phase to cache the frozen prefix
  Tensor run_blocks(const Tensor& x, int begin, int end, BnMode mode,
                    bool detach_params);
  Heads run_heads(const Tensor& features, bool detach_params);

  std::vector<Param> parameters();
  const BackboneConfig& config() const { return cfg_; }
  int num_blocks() const { return static_cast<int>(blocks_.size()); }
  ConvBlock& block(int i) { return blocks_[static_cast<std::size_t>(i)]; }
  const ConvBlock& block(int i) const { return blocks_[static_cast<std::size_t>(i)]; }

 private:
  BackboneConfig cfg_;
  std::vector<ConvBlock> blocks_;
  Tensor feat_w_, feat_b_;  // feature_dim x C_last, feature_dim
  Tensor cls_w_, cls_b_;    // O x feature_dim, O

 public:
  Tensor& feat_w() { return feat_w_; }
  Tensor& feat_b() { return feat_b_; }
  Tensor& cls_w() { return cls_w_; }
  Tensor& cls_b() { return cls_b_; }
};

// Cosine of the angle between every embedding row and every class-weight
// row; rejects zero-norm rows with the row index.
Tensor arcface_angles(const Tensor& embedding, const Tensor& class_weights);

// Replace every BN layer's running statistics with the statistics of this
// batch (full replacement, not a blend). Classifier weights untouched.
// Returns false when the batch is too small for a variance estimate
// (size < 2); the recalibration still runs.
bool adabn_recalibrate(Backbone& model, const Tensor& batch);

}  // namespace abra
