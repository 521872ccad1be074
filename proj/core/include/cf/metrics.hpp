#pragma once

#include <vector>

#include "cf/mat.hpp"
#include "cf/rng.hpp"

namespace cf {

// Squared maximum mean discrepancy between two samples (rows = examples)
// under a Gaussian kernel exp(-|x - y|^2 / (2 h^2)). bandwidth <= 0
// selects the median pairwise distance over the pooled sample.
struct MmdResult {
  double u_stat = 0.0;  // unbiased estimate, can be negative
  double v_stat = 0.0;  // biased (diagonal included), always >= 0
  double bandwidth = 0.0;
};
MmdResult mmd2(const Mat& a, const Mat& b, double bandwidth = 0.0);

// Label-permutation test of H0 "same distribution". p_value uses the
// add-one convention; null_u holds the permuted U-statistics.
struct MmdTest {
  MmdResult observed;
  double p_value = 1.0;
  std::vector<double> null_u;

  // Null quantile, linear interpolation over the sorted permuted stats.
  double null_quantile(double q) const;
};
MmdTest mmd_permutation_test(const Mat& a, const Mat& b, Index n_permutations,
                             double bandwidth, Rng& rng);

}  // namespace cf
