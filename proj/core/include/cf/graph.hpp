#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <vector>

#include "cf/causal_mask.hpp"
#include "cf/mat.hpp"

namespace cf {

// Eager reverse-mode tape over row-major double matrices. Values are
// computed at node creation; backward() replays registered closures in
// reverse creation order and then flushes parameter gradients into their
// sinks. Buffers live in a monotonic arena that clear() recycles, so one
// Graph instance can be reused across many examples without reallocating.
//
// The op set is exactly what the denoiser needs; there is no broadcasting
// beyond the documented cases and no implicit shape coercion.
class Graph {
 public:
  using Id = std::int32_t;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Drops all nodes but keeps arena chunks for reuse.
  void clear();

  // Leaf holding a copy of value; receives no gradient flush.
  Id input(const Mat& value);
  // Leaf borrowing external storage; the caller keeps it alive.
  Id input_view(const double* data, Index rows, Index cols);
  // Leaf borrowing parameter storage. If grad_sink is non-null, backward()
  // accumulates this node's gradient into it (shapes must match).
  Id param(const Mat& value, Mat* grad_sink);

  Id add(Id a, Id b);
  Id matmul(Id a, Id b);
  // y = x * w + bias, bias is 1 x cols(w) and broadcasts over rows.
  Id linear(Id x, Id w, Id bias);
  Id concat_rows(const std::vector<Id>& parts);
  Id slice_rows(Id x, Index row0, Index n_rows);
  // Row-wise affine normalization; gain and bias are 1 x cols(x).
  Id layer_norm(Id x, Id gain, Id bias, double eps = 1e-5);
  // RMS normalization over each head segment of each row; gain is
  // 1 x cols(x), applied per channel.
  Id head_rms_norm(Id x, Id gain, Index n_heads, double eps = 1e-6);
  Id gelu(Id x);  // exact erf form
  // Multi-head scaled dot-product attention with a boolean visibility
  // mask over the full sequence. q, k, v are (n, dim); mask is n x n.
  Id masked_attention(Id q, Id k, Id v, const AttentionMask& mask, Index n_heads);
  // Gathers table rows by index; gradients scatter-add back.
  Id rows_lookup(Id table, const std::vector<Index>& ids);
  // Scalar loss: scale * sum_r weights[r] * |pred_r - target_r|^2.
  Id weighted_mse(Id pred, const Mat& target, const std::vector<double>& row_weights,
                  double scale);

  Index rows(Id id) const { return nodes_[static_cast<std::size_t>(id)].rows; }
  Index cols(Id id) const { return nodes_[static_cast<std::size_t>(id)].cols; }
  ConstMatMap value(Id id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return ConstMatMap(n.val, n.rows, n.cols);
  }
  Mat value_copy(Id id) const;
  double scalar(Id id) const;

  // Seeds d(loss)/d(loss) = 1, runs the tape backward, flushes parameter
  // gradients. loss must be 1 x 1.
  void backward(Id loss);

 private:
  struct Node {
    Index rows = 0, cols = 0;
    double* val = nullptr;
    double* grad = nullptr;  // lazily allocated, zero-initialized
    Mat* sink = nullptr;
    std::function<void()> back;  // null for leaves
  };

  double* arena_alloc(Index n);
  double* grad_of(Id id);
  Id new_node(Index rows, Index cols);
  MatMap val_map(Id id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    return MatMap(n.val, n.rows, n.cols);
  }
  MatMap grad_map(Id id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    return MatMap(grad_of(id), n.rows, n.cols);
  }
  void check_id(Id id) const;

  struct Chunk {
    struct Free {
      void operator()(double* p) const { std::free(p); }
    };
    std::unique_ptr<double[], Free> data;
    std::size_t cap = 0;
  };

  std::vector<Node> nodes_;
  std::vector<Id> param_nodes_;
  std::vector<Chunk> chunks_;
  std::size_t active_chunk_ = 0;
  std::size_t chunk_used_ = 0;
};

}  // namespace cf
