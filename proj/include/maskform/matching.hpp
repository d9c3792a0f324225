#pragma once

#include <vector>

#include "maskform/losses.hpp"
#include "maskform/types.hpp"

namespace maskform {

// entry(i,j) = -p_i(c_j) + mask_loss(m_i, m_j). Requires rows >= cols.
struct CostMatrix {
  int rows = 0;  // predictions
  int cols = 0;  // ground-truth segments
  std::vector<double> cost;

  double at(int i, int j) const {
    return cost[static_cast<size_t>(i) * cols + j];
  }
  double& at(int i, int j) {
    return cost[static_cast<size_t>(i) * cols + j];
  }
};

// Uses the same mask_loss as training, on detached values.
CostMatrix build_cost_matrix(const PredictionSet& predictions,
                             const std::vector<GtSegment>& gt_segments,
                             const LossWeights& w);

// Minimum-cost injective assignment of columns to rows, O(n^3) with
// potentials on the sentinel-padded square matrix. Ties break toward the
// lowest row index.
Assignment hungarian(const CostMatrix& cost);

// Slot i is matched to the gt segment with class label i+1, or no-object if
// that class is absent. Requires num_predictions == num_classes and unique gt
// classes.
Assignment fixed_matching(const std::vector<GtSegment>& gt_segments,
                          int num_classes, int num_predictions);

// Exhaustive minimum over injections; refuses cols > 8. Among equal-cost
// optima returns the lexicographically smallest column->row map.
Assignment brute_force_matching(const CostMatrix& cost);

// Sum of matched entries in ascending column order.
double assignment_cost(const CostMatrix& cost, const Assignment& assignment);

}  // namespace maskform
