#include "cf/dataset.hpp"

#include <cmath>
#include <string>

#include "cf/error.hpp"
#include "cf/model.hpp"

namespace cf {

void DataConfig::validate() const {
  if (n < 2) throw ParameterError("data.n: must be >= 2");
  if (!(noise_sigma > 0.0)) throw ParameterError("data.noise_sigma: must be > 0");
  if (!(corr >= 0.0 && corr <= 1.0)) throw ParameterError("data.corr: must lie in [0, 1]");
  if (!(held_out_frac > 0.0 && held_out_frac < 1.0))
    throw ParameterError("data.held_out: must lie in (0, 1)");
}

Mat class_mean_pattern(Index grid_side, Index token_dim, Index class_id) {
  if (class_id < 0) throw ParameterError("class_id: must be >= 0");
  Mat m(grid_side * grid_side, token_dim);
  if (class_id == 0) {
    m.fill(1.0);
  } else if (class_id == 1) {
    m.fill(-1.0);
  } else {
    // Fixed Rademacher pattern per class, independent of any run seed.
    Rng rng(mix_seed(0x434c5353ull /* "CLSS" */, static_cast<std::uint64_t>(class_id)));
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.below(2) == 0 ? 1.0 : -1.0;
  }
  return m;
}

namespace {

Mat mixture_example(const DataConfig& cfg, const Mat& mean, Rng& rng) {
  Mat x = mean;
  const double g = rng.normal();
  const double a = cfg.noise_sigma * std::sqrt(cfg.corr);
  const double b = cfg.noise_sigma * std::sqrt(1.0 - cfg.corr);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] += a * g + b * rng.normal();
  return x;
}

Mat shapes_example(const DataConfig& cfg, Index grid_side, Index patch, Index class_id,
                   Rng& rng) {
  const Index side = grid_side * patch;
  Mat img(side, side, -1.0);
  if (class_id % 2 == 0) {
    // Rectangle: jittered origin and size, at least 3 pixels per side.
    const Index max_w = side - 2;
    const Index w = 3 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(max_w - 2)));
    const Index h = 3 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(max_w - 2)));
    const Index x0 = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(side - w - 1)));
    const Index y0 = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(side - h - 1)));
    for (Index r = y0; r < y0 + h; ++r)
      for (Index c = x0; c < x0 + w; ++c) img(r, c) = 1.0;
  } else {
    // Cross: one full row band and one full column band through a
    // jittered center.
    const Index thick = 1 + static_cast<Index>(rng.below(2));
    const Index cy =
        thick + static_cast<Index>(rng.below(static_cast<std::uint64_t>(side - 2 * thick)));
    const Index cx =
        thick + static_cast<Index>(rng.below(static_cast<std::uint64_t>(side - 2 * thick)));
    for (Index r = cy - thick + 1; r <= cy; ++r)
      for (Index c = 0; c < side; ++c) img(r, c) = 1.0;
    for (Index c = cx - thick + 1; c <= cx; ++c)
      for (Index r = 0; r < side; ++r) img(r, c) = 1.0;
  }
  for (Index i = 0; i < img.size(); ++i) img.data()[i] += cfg.noise_sigma * rng.normal();
  return patchify(img, patch, 1);
}

}  // namespace

ToyDataset make_toy_dataset(const DataConfig& cfg, Index grid_side, Index token_dim,
                            Index n_classes, Rng& rng) {
  cfg.validate();
  if (grid_side < 1) throw ParameterError("grid_side: must be >= 1");
  if (token_dim < 1) throw ParameterError("token_dim: must be >= 1");
  if (n_classes < 1) throw ParameterError("n_classes: must be >= 1");
  if (cfg.n < 2 * n_classes)
    throw ParameterError("data.n: must be >= 2 * n_classes, got " + std::to_string(cfg.n));

  Index patch = 0;
  if (cfg.kind == DatasetKind::kShapes) {
    patch = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(token_dim))));
    if (patch * patch != token_dim)
      throw ParameterError("data.kind: shapes requires a square token_dim, got " +
                           std::to_string(token_dim));
    if (grid_side * patch < 8)
      throw ParameterError("data.kind: shapes requires images of at least 8 pixels per side");
  }

  std::vector<Mat> means;
  means.reserve(static_cast<std::size_t>(n_classes));
  for (Index c = 0; c < n_classes; ++c)
    means.push_back(class_mean_pattern(grid_side, token_dim, c));

  // Generate per class in round-robin label order; the draw sequence is
  // one example at a time, so the dataset is a pure function of the seed.
  std::vector<std::vector<Mat>> by_class(static_cast<std::size_t>(n_classes));
  for (Index i = 0; i < cfg.n; ++i) {
    const Index c = i % n_classes;
    Mat x = cfg.kind == DatasetKind::kGaussianMixtureGrid
                ? mixture_example(cfg, means[static_cast<std::size_t>(c)], rng)
                : shapes_example(cfg, grid_side, patch, c, rng);
    by_class[static_cast<std::size_t>(c)].push_back(std::move(x));
  }

  ToyDataset ds;
  ds.grid_side = grid_side;
  ds.token_dim = token_dim;
  ds.n_classes = n_classes;
  for (Index c = 0; c < n_classes; ++c) {
    auto& xs = by_class[static_cast<std::size_t>(c)];
    const auto total = static_cast<Index>(xs.size());
    Index held = static_cast<Index>(std::floor(static_cast<double>(total) * cfg.held_out_frac));
    held = std::max<Index>(held, 1);
    const Index train = total - held;
    for (Index i = 0; i < total; ++i) {
      if (i < train) {
        ds.train_x.push_back(std::move(xs[static_cast<std::size_t>(i)]));
        ds.train_y.push_back(c);
      } else {
        ds.held_x.push_back(std::move(xs[static_cast<std::size_t>(i)]));
        ds.held_y.push_back(c);
      }
    }
  }
  return ds;
}

Mat flatten_examples(const std::vector<Mat>& xs) {
  if (xs.empty()) throw ShapeError("flatten_examples: empty list");
  const Index d = xs[0].size();
  Mat out(static_cast<Index>(xs.size()), d);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].size() != d) throw ShapeError("flatten_examples: ragged example sizes");
    for (Index j = 0; j < d; ++j) out(static_cast<Index>(i), j) = xs[i].data()[j];
  }
  return out;
}

Mat flatten_class(const std::vector<Mat>& xs, const std::vector<Index>& ys, Index class_id) {
  if (xs.size() != ys.size()) throw ShapeError("flatten_class: labels length mismatch");
  std::vector<Mat> picked;
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (ys[i] == class_id) picked.push_back(xs[i]);
  if (picked.empty())
    throw ParameterError("class_id: no examples with label " + std::to_string(class_id));
  return flatten_examples(picked);
}

}  // namespace cf
