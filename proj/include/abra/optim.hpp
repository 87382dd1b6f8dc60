#pragma once

#include <cmath>
#include <vector>

#include "abra/model.hpp"

namespace abra {

// Adam with linear learning-rate warmup and plain L2 decay added to the
// gradient; decay is skipped for params flagged no_decay.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Param> params, double base_lr, double weight_decay,
                long warmup_steps)
      : params_(std::move(params)),
        base_lr_(base_lr),
        weight_decay_(weight_decay),
        warmup_steps_(warmup_steps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor.data().size(), 0.0);
      v_[i].assign(params_[i].tensor.data().size(), 0.0);
    }
  }

  double current_lr() const {
    if (warmup_steps_ <= 0) return base_lr_;
    const long t = step_ + 1;
    return t >= warmup_steps_ ? base_lr_
                              : base_lr_ * static_cast<double>(t) /
                                    static_cast<double>(warmup_steps_);
  }

  // Global gradient-norm clip applied at the top of step(); 0 disables.
  void set_clip_norm(double c) { clip_norm_ = c; }

  void step() {
    if (clip_norm_ > 0) {
      double sq = 0.0;
      for (const auto& p : params_)
        if (p.tensor.has_grad())
          for (double g : p.tensor.grad()) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > clip_norm_) {
        const double scale = clip_norm_ / norm;
        for (auto& p : params_)
          if (p.tensor.has_grad())
            for (double& g : p.tensor.grad()) g *= scale;
      }
    }
    const double lr = current_lr();
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.tensor.has_grad()) continue;
      auto& data = p.tensor.data();
      const auto& grad = p.tensor.grad();
      for (std::size_t j = 0; j < data.size(); ++j) {
        double g = grad[j];
        if (!p.no_decay) g += weight_decay_ * data[j];
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        data[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Param> params_;
  std::vector<std::vector<double>> m_, v_;
  double base_lr_;
  double weight_decay_;
  long warmup_steps_;
  long step_ = 0;
  double clip_norm_ = 0.0;
  static constexpr double beta1_ = 0.9;
  static constexpr double beta2_ = 0.999;
  static constexpr double eps_ = 1e-8;
};

}  // namespace abra
