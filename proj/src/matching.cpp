#include "maskform/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

namespace maskform {

void Assignment::validate(int num_gt) const {
  std::vector<int> seen(static_cast<size_t>(num_gt), 0);
  for (int s : sigma) {
    if (s == kNoObject) continue;
    if (s < 0 || s >= num_gt)
      throw std::invalid_argument("assignment: segment index out of range");
    if (seen[static_cast<size_t>(s)]++)
      throw std::invalid_argument("assignment: segment matched twice");
  }
  for (int j = 0; j < num_gt; ++j) {
    if (!seen[static_cast<size_t>(j)])
      throw std::invalid_argument("assignment: segment " + std::to_string(j) +
                                  " unmatched");
  }
}

namespace {

Tensor detach_mask_row(const Tensor& mask_probs, int i) {
  const int h = mask_probs.dim(1), w = mask_probs.dim(2);
  const double* src = mask_probs.data() + static_cast<size_t>(i) * h * w;
  return Tensor::from_data({h, w},
                           std::vector<double>(src, src + static_cast<size_t>(h) * w));
}

}  // namespace

CostMatrix build_cost_matrix(const PredictionSet& predictions,
                             const std::vector<GtSegment>& gt_segments,
                             const LossWeights& w) {
  const int n = predictions.num_queries();
  const int num_gt = static_cast<int>(gt_segments.size());
  if (n < num_gt) {
    throw std::invalid_argument(
        "build_cost_matrix: fewer predictions (" + std::to_string(n) +
        ") than ground-truth segments (" + std::to_string(num_gt) + ")");
  }
  CostMatrix cm;
  cm.rows = n;
  cm.cols = num_gt;
  cm.cost.assign(static_cast<size_t>(n) * num_gt, 0.0);
  for (int i = 0; i < n; ++i) {
    Tensor pred_mask = detach_mask_row(predictions.mask_probs, i);
    for (int j = 0; j < num_gt; ++j) {
      const GtSegment& gt = gt_segments[static_cast<size_t>(j)];
      const double p = predictions.class_probs.at(i, class_column(gt.class_id));
      const double lm = mask_loss(pred_mask, gt.mask, w).item();
      cm.at(i, j) = -p + lm;
      if (!std::isfinite(cm.at(i, j)))
        throw std::domain_error("build_cost_matrix: non-finite cost entry");
    }
  }
  return cm;
}

Assignment hungarian(const CostMatrix& cost) {
  const int n = cost.rows;
  const int m = cost.cols;
  if (m > n) throw std::invalid_argument("hungarian: more columns than rows");
  Assignment out;
  out.sigma.assign(static_cast<size_t>(n), kNoObject);
  if (m == 0) return out;

  // Pad to square with a uniform sentinel one above the largest entry; the
  // sentinel columns absorb the unmatched rows.
  double max_entry = cost.cost.empty()
                         ? 0.0
                         : *std::max_element(cost.cost.begin(), cost.cost.end());
  for (double v : cost.cost) {
    if (!std::isfinite(v))
      throw std::invalid_argument("hungarian: non-finite cost");
  }
  const double sentinel = max_entry + 1.0;
  auto entry = [&](int i, int j) -> double {
    return j < m ? cost.at(i, j) : sentinel;
  };

  const double kInf = std::numeric_limits<double>::infinity();
  // Row/column potentials, 1-indexed; match[j] = row matched to column j.
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> match(static_cast<size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = match[static_cast<size_t>(j0)];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = entry(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] -
                           v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(match[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      match[static_cast<size_t>(j0)] = match[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= n; ++j) {
    if (j - 1 < m && match[static_cast<size_t>(j)] != 0)
      out.sigma[static_cast<size_t>(match[static_cast<size_t>(j)] - 1)] = j - 1;
  }
  return out;
}

Assignment fixed_matching(const std::vector<GtSegment>& gt_segments,
                          int num_classes, int num_predictions) {
  if (num_predictions != num_classes) {
    throw std::invalid_argument(
        "fixed_matching: requires one prediction slot per class (" +
        std::to_string(num_predictions) + " != " + std::to_string(num_classes) +
        ")");
  }
  std::map<int, int> by_class;
  for (size_t j = 0; j < gt_segments.size(); ++j) {
    const int c = gt_segments[j].class_id;
    if (c < 1 || c > num_classes)
      throw std::invalid_argument("fixed_matching: gt class out of range");
    if (!by_class.emplace(c, static_cast<int>(j)).second)
      throw std::invalid_argument(
          "fixed_matching: duplicate ground-truth class " + std::to_string(c));
  }
  Assignment out;
  out.sigma.assign(static_cast<size_t>(num_predictions), kNoObject);
  for (const auto& [c, j] : by_class) out.sigma[static_cast<size_t>(c - 1)] = j;
  return out;
}

namespace {

void brute_force_recurse(const CostMatrix& cost, int col, double acc,
                         std::vector<int>& row_of_col, std::vector<char>& used,
                         double& best, std::vector<int>& best_rows) {
  if (col == cost.cols) {
    if (acc < best) {
      best = acc;
      best_rows = row_of_col;
    }
    return;
  }
  for (int i = 0; i < cost.rows; ++i) {
    if (used[static_cast<size_t>(i)]) continue;
    used[static_cast<size_t>(i)] = 1;
    row_of_col[static_cast<size_t>(col)] = i;
    brute_force_recurse(cost, col + 1, acc + cost.at(i, col), row_of_col, used,
                        best, best_rows);
    used[static_cast<size_t>(i)] = 0;
  }
}

}  // namespace

Assignment brute_force_matching(const CostMatrix& cost) {
  if (cost.cols > 8)
    throw std::invalid_argument(
        "brute_force_matching: refusing more than 8 columns");
  if (cost.cols > cost.rows)
    throw std::invalid_argument("brute_force_matching: more columns than rows");
  Assignment out;
  out.sigma.assign(static_cast<size_t>(cost.rows), kNoObject);
  if (cost.cols == 0) return out;
  std::vector<int> row_of_col(static_cast<size_t>(cost.cols), -1);
  std::vector<int> best_rows;
  std::vector<char> used(static_cast<size_t>(cost.rows), 0);
  double best = std::numeric_limits<double>::infinity();
  brute_force_recurse(cost, 0, 0.0, row_of_col, used, best, best_rows);
  for (int j = 0; j < cost.cols; ++j)
    out.sigma[static_cast<size_t>(best_rows[static_cast<size_t>(j)])] = j;
  return out;
}

double assignment_cost(const CostMatrix& cost, const Assignment& assignment) {
  std::vector<int> row_of_col(static_cast<size_t>(cost.cols), -1);
  for (int i = 0; i < assignment.num_predictions(); ++i) {
    const int j = assignment.sigma[static_cast<size_t>(i)];
    if (j != kNoObject) row_of_col[static_cast<size_t>(j)] = i;
  }
  double total = 0.0;
  for (int j = 0; j < cost.cols; ++j) {
    if (row_of_col[static_cast<size_t>(j)] < 0)
      throw std::invalid_argument("assignment_cost: column unmatched");
    total += cost.at(row_of_col[static_cast<size_t>(j)], j);
  }
  return total;
}

}  // namespace maskform
