#include "maskform/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace maskform {

namespace {

constexpr double kProbClampLo = 1e-7;
constexpr double kProbClampHi = 1.0 - 1e-7;
constexpr double kLogClampLo = 1e-12;

void check_binary_mask(const Tensor& gt_mask) {
  for (int i = 0; i < gt_mask.numel(); ++i) {
    const double v = gt_mask.at(i);
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument("gt mask must be binary (0/1)");
  }
}

// 1 - x without autograd noise.
Tensor one_minus(const Tensor& x) {
  return add_constant(scale_by_constant(x, -1.0), 1.0);
}

}  // namespace

void LossWeights::validate() const {
  if (lambda_focal < 0 || lambda_dice < 0 || no_object_weight < 0 ||
      focal_gamma < 0 || focal_alpha < 0 || dice_epsilon < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

Tensor per_pixel_ce_loss(const Tensor& scores, const SemanticLabelMap& labels) {
  if (scores.ndim() != 3)
    throw std::invalid_argument("per_pixel_ce_loss: scores must be (K,H,W)");
  const int k = scores.dim(0), h = scores.dim(1), w = scores.dim(2);
  if (labels.height != h || labels.width != w)
    throw std::invalid_argument("per_pixel_ce_loss: label map size mismatch");
  Tensor onehot = Tensor::zeros({k, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int c = labels.at(y, x);
      if (c < 1 || c > k)
        throw std::invalid_argument("per_pixel_ce_loss: label " +
                                    std::to_string(c) + " out of range 1.." +
                                    std::to_string(k));
      onehot.at(class_column(c), y, x) = 1.0;
    }
  }
  Tensor log_probs = log_softmax(scores, 0);
  return scale_by_constant(sum_all(mul(log_probs, onehot)),
                           -1.0 / (static_cast<double>(h) * w));
}

Tensor focal_loss(const Tensor& mask_probs, const Tensor& gt_mask, double gamma,
                  double alpha) {
  if (mask_probs.shape() != gt_mask.shape())
    throw std::invalid_argument("focal_loss: shape mismatch");
  check_binary_mask(gt_mask);
  Tensor gt = gt_mask.clone();
  Tensor gt_inv = Tensor::zeros(gt.shape());
  Tensor alpha_t = Tensor::zeros(gt.shape());
  for (int i = 0; i < gt.numel(); ++i) {
    gt_inv.at(i) = 1.0 - gt.at(i);
    alpha_t.at(i) = gt.at(i) == 1.0 ? alpha : 1.0 - alpha;
  }
  Tensor m = clamp(mask_probs, kProbClampLo, kProbClampHi);
  // p_t = m*gt + (1-m)*(1-gt)
  Tensor pt = add(mul(m, gt), mul(one_minus(m), gt_inv));
  Tensor modulator = pow_constant(one_minus(pt), gamma);
  Tensor nll = scale_by_constant(log(pt), -1.0);
  return mean_all(mul(alpha_t, mul(modulator, nll)));
}

Tensor dice_loss(const Tensor& mask_probs, const Tensor& gt_mask, double eps) {
  if (mask_probs.shape() != gt_mask.shape())
    throw std::invalid_argument("dice_loss: shape mismatch");
  check_binary_mask(gt_mask);
  Tensor gt = gt_mask.clone();
  Tensor numer = add_constant(scale_by_constant(sum_all(mul(mask_probs, gt)), 2.0), eps);
  Tensor denom = add_constant(add(sum_all(mask_probs), sum_all(gt)), eps);
  return one_minus(divide(numer, denom));
}

Tensor mask_loss(const Tensor& mask_probs, const Tensor& gt_mask,
                 const LossWeights& w) {
  Tensor focal = focal_loss(mask_probs, gt_mask, w.focal_gamma, w.focal_alpha);
  Tensor dice = dice_loss(mask_probs, gt_mask, w.dice_epsilon);
  return add(scale_by_constant(focal, w.lambda_focal),
             scale_by_constant(dice, w.lambda_dice));
}

Tensor classification_loss(const Tensor& probs, int target_class,
                           const LossWeights& w) {
  if (probs.ndim() != 1)
    throw std::invalid_argument("classification_loss: probs must be 1-D");
  const int num_classes = probs.dim(0) - 1;
  int col;
  double weight;
  if (target_class == kNoObject) {
    col = no_object_column(num_classes);
    weight = w.no_object_weight;
  } else {
    if (target_class < 1 || target_class > num_classes)
      throw std::invalid_argument("classification_loss: class out of range");
    col = class_column(target_class);
    weight = 1.0;
  }
  Tensor onehot = Tensor::zeros(probs.shape());
  onehot.at(col) = 1.0;
  Tensor log_p = log(clamp(probs, kLogClampLo, 1.0));
  return scale_by_constant(sum_all(mul(log_p, onehot)), -weight);
}

Tensor mask_cls_loss(const PredictionSet& predictions,
                     const std::vector<GtSegment>& gt_segments,
                     const Assignment& assignment, const LossWeights& w) {
  const int n = predictions.num_queries();
  const int num_classes = predictions.num_classes();
  if (assignment.num_predictions() != n)
    throw std::invalid_argument("mask_cls_loss: assignment length mismatch");
  assignment.validate(static_cast<int>(gt_segments.size()));

  // Classification term in one pass: selector weights -log p_i(target_i).
  Tensor selector = Tensor::zeros(predictions.class_probs.shape());
  for (int i = 0; i < n; ++i) {
    const int match = assignment.sigma[static_cast<size_t>(i)];
    if (match == kNoObject) {
      selector.at(i, no_object_column(num_classes)) = w.no_object_weight;
    } else {
      selector.at(i, class_column(gt_segments[static_cast<size_t>(match)].class_id)) = 1.0;
    }
  }
  Tensor log_p = log(clamp(predictions.class_probs, kLogClampLo, 1.0));
  Tensor cls_term = scale_by_constant(sum_all(mul(log_p, selector)), -1.0 / n);

  int num_real = 0;
  Tensor mask_term;
  for (int i = 0; i < n; ++i) {
    const int match = assignment.sigma[static_cast<size_t>(i)];
    if (match == kNoObject) continue;
    Tensor pred_mask = select0(predictions.mask_probs, i);
    Tensor term =
        mask_loss(pred_mask, gt_segments[static_cast<size_t>(match)].mask, w);
    mask_term = num_real == 0 ? term : add(mask_term, term);
    ++num_real;
  }
  if (num_real == 0) return cls_term;
  return add(cls_term, scale_by_constant(mask_term, 1.0 / num_real));
}

Tensor aux_mask_cls_loss(const std::vector<PredictionSet>& layer_predictions,
                         const std::vector<GtSegment>& gt_segments,
                         const LossWeights& w, const MatcherFn& matcher) {
  if (layer_predictions.empty())
    throw std::invalid_argument("aux_mask_cls_loss: no layers");
  Tensor total;
  for (size_t l = 0; l < layer_predictions.size(); ++l) {
    Assignment sigma = matcher(layer_predictions[l], gt_segments);
    Tensor term = mask_cls_loss(layer_predictions[l], gt_segments, sigma, w);
    total = l == 0 ? term : add(total, term);
  }
  return total;
}

}  // namespace maskform
