#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <utility>
#include <vector>

#include "cf/error.hpp"

namespace cf {

using Index = std::int64_t;

// 64-byte-aligned storage. Eigen's vectorized kernels peel a scalar
// prologue whose length depends on the buffer address; pinning every
// buffer to the packet alignment keeps results bitwise identical across
// runs and thread counts.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(p); }

  template <class U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
  template <class U>
  bool operator!=(const AlignedAlloc<U>&) const {
    return false;
  }
};

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;

// Dense row-major matrix of doubles; the only tensor type in the numeric
// core. Batches and images are handled as matrices plus explicit
// dimension bookkeeping at call sites.
class Mat {
 public:
  Mat() = default;
  Mat(Index rows, Index cols)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows * cols), 0.0) {
    if (rows < 0 || cols < 0) throw ShapeError("Mat: negative dimension");
  }
  Mat(Index rows, Index cols, double fill) : Mat(rows, cols) {
    for (double& v : data_) v = fill;
  }

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  Index size() const { return rows_ * cols_; }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator()(Index r, Index c) { return data_[static_cast<std::size_t>(r * cols_ + c)]; }
  double operator()(Index r, Index c) const {
    return data_[static_cast<std::size_t>(r * cols_ + c)];
  }

  double* row(Index r) { return data_.data() + r * cols_; }
  const double* row(Index r) const { return data_.data() + r * cols_; }

  MatMap map() { return MatMap(data_.data(), rows_, cols_); }
  ConstMatMap map() const { return ConstMatMap(data_.data(), rows_, cols_); }

  void fill(double v) {
    for (double& x : data_) x = v;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Mat& a, const Mat& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<double, AlignedAlloc<double>> data_;
};

}  // namespace cf
