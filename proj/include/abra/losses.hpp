#pragma once

#include <vector>

#include "abra/tensor.hpp"

namespace abra {

struct LossConfig {
  double lambda = 0.5;    // CE weight; (1 - lambda) goes to the angular term
  double margin = 0.2;    // additive angular margin, radians
  double scale = 16.0;    // cosine logit scale
  double js_weight = 1.0; // stability term coefficient
  int num_classes = 10;

  void validate() const;
};

// lambda * CE(logits) + (1 - lambda) * ArcFace(cosphi)
Tensor adversarial_objective(const Tensor& logits, const Tensor& cosphi,
                             const std::vector<int>& labels,
                             const LossConfig& cfg);

// Supervised terms averaged with equal weight over the clean and perturbed
// halves, plus the JS stability term between the two predictive
// distributions.
Tensor robust_objective(const Tensor& clean_logits, const Tensor& clean_cosphi,
                        const Tensor& pert_logits, const Tensor& pert_cosphi,
                        const std::vector<int>& labels, const LossConfig& cfg);

}  // namespace abra
