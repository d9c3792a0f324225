#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "maskform/tensor.hpp"

namespace maskform {

// Class ids are 1-based: {1..K}. Column c-1 of a class-probability row holds
// class c, column K holds the no-object slot.
constexpr int kVoidId = 0;  // label/segment id 0 marks VOID in panoptic maps

inline int class_column(int class_id) { return class_id - 1; }
inline int no_object_column(int num_classes) { return num_classes; }

// The model output: N probability-mask pairs. Rows of class_probs lie on the
// (K+1)-simplex; mask entries lie in [0,1] and masks may overlap.
struct PredictionSet {
  Tensor class_probs;  // (N, K+1)
  Tensor mask_probs;   // (N, H, W)

  int num_queries() const { return class_probs.dim(0); }
  int num_classes() const { return class_probs.dim(1) - 1; }
  int height() const { return mask_probs.dim(1); }
  int width() const { return mask_probs.dim(2); }
};

// One ground-truth segment: class label plus a binary mask.
struct GtSegment {
  int class_id = 0;
  Tensor mask;  // (H, W), entries in {0,1}
  bool is_thing = false;
};

constexpr int kNoObject = -1;

// sigma[i] is the ground-truth segment index matched to prediction i, or
// kNoObject. Every ground-truth index appears exactly once.
struct Assignment {
  std::vector<int> sigma;

  int num_predictions() const { return static_cast<int>(sigma.size()); }
  int num_matched() const {
    int n = 0;
    for (int s : sigma) n += s != kNoObject;
    return n;
  }
  void validate(int num_gt) const;
};

struct SemanticLabelMap {
  int height = 0, width = 0;
  std::vector<int> labels;  // row-major, values in {1..K} (0 allowed only for
                            // projected panoptic VOID)
  Tensor class_scores;      // optional (K,H,W) marginal scores, sum_i p_i(c)*m_i

  int at(int y, int x) const {
    return labels[static_cast<size_t>(y) * width + x];
  }
  int& at(int y, int x) {
    return labels[static_cast<size_t>(y) * width + x];
  }
};

struct PanopticSegmentInfo {
  int id = 0;
  int class_id = 0;
  int area = 0;
  bool is_thing = false;
  int query_index = -1;  // producing query slot, when model-derived
};

struct PanopticLabelMap {
  int height = 0, width = 0;
  std::vector<int> segment_ids;  // row-major, 0 = VOID
  std::vector<PanopticSegmentInfo> segments;

  int at(int y, int x) const {
    return segment_ids[static_cast<size_t>(y) * width + x];
  }
  int& at(int y, int x) {
    return segment_ids[static_cast<size_t>(y) * width + x];
  }
};

// Projects a panoptic map to per-pixel class labels (VOID -> 0).
SemanticLabelMap panoptic_to_semantic(const PanopticLabelMap& map);

}  // namespace maskform
