#include "abra/losses.hpp"

#include <stdexcept>

namespace abra {

void LossConfig::validate() const {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("LossConfig: lambda must be in [0,1]");
  if (margin < 0.0 || margin >= 1.5707963267948966)
    throw std::invalid_argument("LossConfig: margin must be in [0, pi/2)");
  if (scale <= 0.0)
    throw std::invalid_argument("LossConfig: scale must be positive");
  if (js_weight < 0.0)
    throw std::invalid_argument("LossConfig: js_weight must be nonnegative");
  if (num_classes < 2)
    throw std::invalid_argument("LossConfig: num_classes must be >= 2");
}

Tensor adversarial_objective(const Tensor& logits, const Tensor& cosphi,
                             const std::vector<int>& labels,
                             const LossConfig& cfg) {
  // endpoints stay exact: skip the unused component entirely
  if (cfg.lambda == 1.0) return cross_entropy(logits, labels);
  if (cfg.lambda == 0.0)
    return arcface_loss(cosphi, labels, cfg.margin, cfg.scale);
  Tensor ce = cross_entropy(logits, labels);
  Tensor arc = arcface_loss(cosphi, labels, cfg.margin, cfg.scale);
  return add(scale(ce, cfg.lambda), scale(arc, 1.0 - cfg.lambda));
}

Tensor robust_objective(const Tensor& clean_logits, const Tensor& clean_cosphi,
                        const Tensor& pert_logits, const Tensor& pert_cosphi,
                        const std::vector<int>& labels, const LossConfig& cfg) {
  Tensor sup_clean = adversarial_objective(clean_logits, clean_cosphi, labels, cfg);
  Tensor sup_pert = adversarial_objective(pert_logits, pert_cosphi, labels, cfg);
  Tensor sup = add(scale(sup_clean, 0.5), scale(sup_pert, 0.5));
  if (cfg.js_weight == 0.0) return sup;
  Tensor js = js_divergence(softmax_rows(clean_logits), softmax_rows(pert_logits));
  return add(sup, scale(js, cfg.js_weight));
}

}  // namespace abra
