#pragma once

#include <vector>

#include "cf/mat.hpp"
#include "cf/rng.hpp"

namespace cf {

enum class DatasetKind { kGaussianMixtureGrid, kShapes };

struct DataConfig {
  DatasetKind kind = DatasetKind::kGaussianMixtureGrid;
  Index n = 2000;
  double noise_sigma = 0.25;
  double corr = 0.5;  // shared-factor weight of the mixture field
  double held_out_frac = 0.1;

  void validate() const;
};

// Class-labelled token grids with a disjoint held-out split. Examples are
// stored token-major: each Mat is (grid_side^2, token_dim) in raster
// order.
struct ToyDataset {
  Index grid_side = 0;
  Index token_dim = 0;
  Index n_classes = 0;
  std::vector<Mat> train_x;
  std::vector<Index> train_y;
  std::vector<Mat> held_x;
  std::vector<Index> held_y;
};

// Mean token grid of a mixture class: all +1 for class 0, all -1 for
// class 1, a fixed Rademacher pattern keyed by the class id beyond that.
// Independent of the dataset seed so tests can reference it directly.
Mat class_mean_pattern(Index grid_side, Index token_dim, Index class_id);

// Builds the dataset. Classes are assigned round-robin, so per-class
// counts are balanced to within one. The held-out split takes the last
// held_out_frac of each class (at least one example).
//
// kGaussianMixtureGrid: mean pattern plus correlated Gaussian field
//   sigma * (sqrt(corr) * g * ones + sqrt(1 - corr) * eps)
// with a shared scalar g per example, so clean context carries real
// information about unseen tokens.
//
// kShapes: rectangles (even classes) and crosses (odd classes) rendered
// to pixels on a -1 background, jittered in position and size, plus
// pixel noise, then patchified; token_dim must be a square.
ToyDataset make_toy_dataset(const DataConfig& cfg, Index grid_side, Index token_dim,
                            Index n_classes, Rng& rng);

// Flattens a list of token grids into one row per example.
Mat flatten_examples(const std::vector<Mat>& xs);
// Rows of xs whose label equals class_id, flattened.
Mat flatten_class(const std::vector<Mat>& xs, const std::vector<Index>& ys, Index class_id);

}  // namespace cf
