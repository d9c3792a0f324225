#pragma once

#include <functional>
#include <vector>

#include "maskform/tensor.hpp"
#include "maskform/types.hpp"

namespace maskform {

struct LossWeights {
  double lambda_focal = 20.0;
  double lambda_dice = 1.0;
  double no_object_weight = 0.1;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double dice_epsilon = 1.0;

  void validate() const;
};

// Mean over pixels of -log softmax(scores)[label]. scores: (K,H,W), labels in
// {1..K}.
Tensor per_pixel_ce_loss(const Tensor& scores, const SemanticLabelMap& labels);

// Mean over pixels of -alpha_t (1-p_t)^gamma log(p_t); p_t = m where gt = 1,
// 1 - m elsewhere. m is clamped to [1e-7, 1-1e-7] before the log.
Tensor focal_loss(const Tensor& mask_probs, const Tensor& gt_mask, double gamma,
                  double alpha);

// 1 - (2 sum(m*gt) + eps) / (sum(m) + sum(gt) + eps).
Tensor dice_loss(const Tensor& mask_probs, const Tensor& gt_mask, double eps);

// lambda_focal * focal + lambda_dice * dice.
Tensor mask_loss(const Tensor& mask_probs, const Tensor& gt_mask,
                 const LossWeights& w);

// -log p(c); scaled by no_object_weight when target_class == kNoObject.
// probs: (K+1,) row on the simplex.
Tensor classification_loss(const Tensor& probs, int target_class,
                           const LossWeights& w);

// The per-image set loss for a given assignment: the classification term is
// averaged over the N predictions, the mask term over the matched (real)
// segments.
Tensor mask_cls_loss(const PredictionSet& predictions,
                     const std::vector<GtSegment>& gt_segments,
                     const Assignment& assignment, const LossWeights& w);

using MatcherFn = std::function<Assignment(const PredictionSet&,
                                           const std::vector<GtSegment>&)>;

// Sum of mask_cls_loss over decoder layers, with the matching recomputed
// independently per layer.
Tensor aux_mask_cls_loss(const std::vector<PredictionSet>& layer_predictions,
                         const std::vector<GtSegment>& gt_segments,
                         const LossWeights& w, const MatcherFn& matcher);

}  // namespace maskform
