#include "cf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cf/error.hpp"

namespace cf {

namespace {

// Gram matrix of the pooled rows under the Gaussian kernel.
EigenRowMat gram(const Mat& pooled, double bandwidth) {
  // |x - y|^2 via the square-expansion identity, clamped at zero.
  Eigen::VectorXd sq = pooled.map().rowwise().squaredNorm();
  EigenRowMat d2 = (-2.0 * (pooled.map() * pooled.map().transpose())).eval();
  d2.colwise() += sq;
  d2.rowwise() += sq.transpose();
  const double inv = -0.5 / (bandwidth * bandwidth);
  return (d2.array().max(0.0) * inv).exp().matrix();
}

double median_bandwidth(const Mat& pooled) {
  // Median pairwise distance over at most the first 512 rows; the cap
  // keeps the O(n^2) scan bounded and is deterministic.
  const Index n = std::min<Index>(pooled.rows(), 512);
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      d.push_back((pooled.map().row(i) - pooled.map().row(j)).norm());
  if (d.empty()) throw ParameterError("mmd2: need at least two pooled rows");
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  double med = d[d.size() / 2];
  if (!(med > 0.0)) med = 1.0;  // degenerate all-equal samples
  return med;
}

Mat pool_rows(const Mat& a, const Mat& b) {
  Mat pooled(a.rows() + b.rows(), a.cols());
  pooled.map().topRows(a.rows()) = a.map();
  pooled.map().bottomRows(b.rows()) = b.map();
  return pooled;
}

// U- and V-statistics for the split of the Gram matrix given by idx:
// the first m entries belong to sample A, the rest to sample B.
void stats_for_split(const EigenRowMat& g, const std::vector<Index>& idx, Index m,
                     double* u_stat, double* v_stat) {
  const auto n_total = static_cast<Index>(idx.size());
  const Index n = n_total - m;
  double saa = 0.0, sbb = 0.0, sab = 0.0, daa = 0.0, dbb = 0.0;
  for (Index i = 0; i < n_total; ++i) {
    const double* row = g.data() + idx[static_cast<std::size_t>(i)] * g.cols();
    const bool ia = i < m;
    for (Index j = i + 1; j < n_total; ++j) {
      const double k = row[idx[static_cast<std::size_t>(j)]];
      const bool ja = j < m;
      if (ia && ja)
        saa += k;
      else if (!ia && !ja)
        sbb += k;
      else
        sab += k;
    }
    if (ia)
      daa += row[idx[static_cast<std::size_t>(i)]];
    else
      dbb += row[idx[static_cast<std::size_t>(i)]];
  }
  const double mm = static_cast<double>(m), nn = static_cast<double>(n);
  if (u_stat)
    *u_stat = 2.0 * saa / (mm * (mm - 1.0)) + 2.0 * sbb / (nn * (nn - 1.0)) -
              2.0 * sab / (mm * nn);
  if (v_stat)
    *v_stat = (2.0 * saa + daa) / (mm * mm) + (2.0 * sbb + dbb) / (nn * nn) -
              2.0 * sab / (mm * nn);
}

void check_inputs(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) throw ShapeError("mmd2: feature dimensions differ");
  if (a.rows() < 2 || b.rows() < 2)
    throw ParameterError("mmd2: each sample needs at least two rows");
}

}  // namespace

MmdResult mmd2(const Mat& a, const Mat& b, double bandwidth) {
  check_inputs(a, b);
  const Mat pooled = pool_rows(a, b);
  MmdResult r;
  r.bandwidth = bandwidth > 0.0 ? bandwidth : median_bandwidth(pooled);
  const EigenRowMat g = gram(pooled, r.bandwidth);
  std::vector<Index> idx(static_cast<std::size_t>(pooled.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  stats_for_split(g, idx, a.rows(), &r.u_stat, &r.v_stat);
  return r;
}

double MmdTest::null_quantile(double q) const {
  if (null_u.empty()) throw ParameterError("null_quantile: no permutations recorded");
  if (!(q >= 0.0 && q <= 1.0)) throw ParameterError("null_quantile: q must lie in [0, 1]");
  std::vector<double> sorted = null_u;
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

MmdTest mmd_permutation_test(const Mat& a, const Mat& b, Index n_permutations,
                             double bandwidth, Rng& rng) {
  check_inputs(a, b);
  if (n_permutations < 1) throw ParameterError("mmd.permutations: must be >= 1");
  const Mat pooled = pool_rows(a, b);

  MmdTest test;
  test.observed.bandwidth = bandwidth > 0.0 ? bandwidth : median_bandwidth(pooled);
  const EigenRowMat g = gram(pooled, test.observed.bandwidth);

  std::vector<Index> idx(static_cast<std::size_t>(pooled.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  stats_for_split(g, idx, a.rows(), &test.observed.u_stat, &test.observed.v_stat);

  test.null_u.reserve(static_cast<std::size_t>(n_permutations));
  Index exceed = 0;
  for (Index p = 0; p < n_permutations; ++p) {
    rng.shuffle(idx);
    double u = 0.0;
    stats_for_split(g, idx, a.rows(), &u, nullptr);
    test.null_u.push_back(u);
    if (u >= test.observed.u_stat) ++exceed;
  }
  test.p_value = static_cast<double>(1 + exceed) / static_cast<double>(n_permutations + 1);
  return test;
}

}  // namespace cf
