#include "cf/graph.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <new>
#include <numbers>
#include <string>

#include "cf/error.hpp"

namespace cf {

namespace {

constexpr std::size_t kChunkDoubles = std::size_t{1} << 20;  // 8 MiB

using StridedMap = Eigen::Map<EigenRowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const EigenRowMat, 0, Eigen::OuterStride<>>;
using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;

}  // namespace

void Graph::clear() {
  nodes_.clear();
  param_nodes_.clear();
  active_chunk_ = 0;
  chunk_used_ = 0;
}

double* Graph::arena_alloc(Index n) {
  // Sizes round up to the 64-byte packet unit so every allocation starts
  // aligned; see AlignedAlloc in mat.hpp for why alignment is pinned.
  constexpr std::size_t kUnit = 64 / sizeof(double);
  auto need = (static_cast<std::size_t>(n) + kUnit - 1) / kUnit * kUnit;
  while (active_chunk_ < chunks_.size() && chunk_used_ + need > chunks_[active_chunk_].cap) {
    ++active_chunk_;
    chunk_used_ = 0;
  }
  if (active_chunk_ == chunks_.size()) {
    Chunk c;
    c.cap = std::max(need, kChunkDoubles);
    c.data.reset(static_cast<double*>(std::aligned_alloc(64, c.cap * sizeof(double))));
    if (!c.data) throw std::bad_alloc();
    chunks_.push_back(std::move(c));
    chunk_used_ = 0;
  }
  double* p = chunks_[active_chunk_].data.get() + chunk_used_;
  chunk_used_ += need;
  return p;
}

Graph::Id Graph::new_node(Index rows, Index cols) {
  if (rows < 1 || cols < 1) throw ShapeError("graph: node dimensions must be positive");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.val = arena_alloc(rows * cols);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

void Graph::check_id(Id id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw ParameterError("graph: invalid node id " + std::to_string(id));
}

double* Graph::grad_of(Id id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad) {
    n.grad = arena_alloc(n.rows * n.cols);
    std::memset(n.grad, 0, static_cast<std::size_t>(n.rows * n.cols) * sizeof(double));
  }
  return n.grad;
}

Mat Graph::value_copy(Id id) const {
  check_id(id);
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  Mat out(n.rows, n.cols);
  std::memcpy(out.data(), n.val, static_cast<std::size_t>(n.rows * n.cols) * sizeof(double));
  return out;
}

double Graph::scalar(Id id) const {
  check_id(id);
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.rows != 1 || n.cols != 1) throw ShapeError("graph: scalar() on non-1x1 node");
  return n.val[0];
}

Graph::Id Graph::input(const Mat& value) {
  if (value.empty()) throw ShapeError("graph: input must be non-empty");
  Id id = new_node(value.rows(), value.cols());
  std::memcpy(nodes_.back().val, value.data(),
              static_cast<std::size_t>(value.size()) * sizeof(double));
  return id;
}

Graph::Id Graph::input_view(const double* data, Index rows, Index cols) {
  if (rows < 1 || cols < 1) throw ShapeError("graph: input_view dimensions must be positive");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.val = const_cast<double*>(data);  // leaves are never written
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Graph::Id Graph::param(const Mat& value, Mat* grad_sink) {
  if (grad_sink && !grad_sink->same_shape(value))
    throw ShapeError("graph: param gradient sink shape mismatch");
  Id id = input_view(value.data(), value.rows(), value.cols());
  nodes_.back().sink = grad_sink;
  if (grad_sink) param_nodes_.push_back(id);
  return id;
}

Graph::Id Graph::add(Id a, Id b) {
  check_id(a);
  check_id(b);
  if (rows(a) != rows(b) || cols(a) != cols(b)) throw ShapeError("graph.add: shape mismatch");
  Id out = new_node(rows(a), cols(a));
  val_map(out) = value(a) + value(b);
  nodes_.back().back = [this, out, a, b] {
    ConstMatMap g(nodes_[static_cast<std::size_t>(out)].grad, rows(out), cols(out));
    grad_map(a) += g;
    grad_map(b) += g;
  };
  return out;
}

Graph::Id Graph::matmul(Id a, Id b) {
  check_id(a);
  check_id(b);
  if (cols(a) != rows(b)) throw ShapeError("graph.matmul: inner dimensions differ");
  Id out = new_node(rows(a), cols(b));
  val_map(out).noalias() = value(a) * value(b);
  nodes_.back().back = [this, out, a, b] {
    ConstMatMap g(nodes_[static_cast<std::size_t>(out)].grad, rows(out), cols(out));
    grad_map(a).noalias() += g * value(b).transpose();
    grad_map(b).noalias() += value(a).transpose() * g;
  };
  return out;
}

Graph::Id Graph::linear(Id x, Id w, Id bias) {
  check_id(x);
  check_id(w);
  check_id(bias);
  if (cols(x) != rows(w)) throw ShapeError("graph.linear: x/w inner dimensions differ");
  if (rows(bias) != 1 || cols(bias) != cols(w))
    throw ShapeError("graph.linear: bias must be 1 x cols(w)");
  Id out = new_node(rows(x), cols(w));
  val_map(out).noalias() = value(x) * value(w);
  val_map(out).rowwise() += value(bias).row(0);
  nodes_.back().back = [this, out, x, w, bias] {
    ConstMatMap g(nodes_[static_cast<std::size_t>(out)].grad, rows(out), cols(out));
    grad_map(x).noalias() += g * value(w).transpose();
    grad_map(w).noalias() += value(x).transpose() * g;
    grad_map(bias).row(0) += g.colwise().sum();
  };
  return out;
}

Graph::Id Graph::concat_rows(const std::vector<Id>& parts) {
  if (parts.empty()) throw ShapeError("graph.concat_rows: no parts");
  Index total = 0;
  const Index c = cols(parts[0]);
  for (Id p : parts) {
    check_id(p);
    if (cols(p) != c) throw ShapeError("graph.concat_rows: column counts differ");
    total += rows(p);
  }
  Id out = new_node(total, c);
  Index off = 0;
  for (Id p : parts) {
    val_map(out).middleRows(off, rows(p)) = value(p);
    off += rows(p);
  }
  nodes_.back().back = [this, out, parts] {
    ConstMatMap g(nodes_[static_cast<std::size_t>(out)].grad, rows(out), cols(out));
    Index o = 0;
    for (Id p : parts) {
      grad_map(p) += g.middleRows(o, rows(p));
      o += rows(p);
    }
  };
  return out;
}

Graph::Id Graph::slice_rows(Id x, Index row0, Index n_rows) {
  check_id(x);
  if (row0 < 0 || n_rows < 1 || row0 + n_rows > rows(x))
    throw ShapeError("graph.slice_rows: range out of bounds");
  Id out = new_node(n_rows, cols(x));
  val_map(out) = value(x).middleRows(row0, n_rows);
  nodes_.back().back = [this, out, x, row0, n_rows] {
    ConstMatMap g(nodes_[static_cast<std::size_t>(out)].grad, rows(out), cols(out));
    grad_map(x).middleRows(row0, n_rows) += g;
  };
  return out;
}

Graph::Id Graph::layer_norm(Id x, Id gain, Id bias, double eps) {
  check_id(x);
  check_id(gain);
  check_id(bias);
  const Index n = rows(x), c = cols(x);
  if (rows(gain) != 1 || cols(gain) != c || rows(bias) != 1 || cols(bias) != c)
    throw ShapeError("graph.layer_norm: gain/bias must be 1 x cols(x)");
  Id out = new_node(n, c);
  double* stats = arena_alloc(2 * n);  // per row: mean, 1/std
  auto xv = value(x);
  auto gv = value(gain);
  auto bv = value(bias);
  for (Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + eps);
    stats[2 * r] = mu;
    stats[2 * r + 1] = rstd;
    val_map(out).row(r).array() =
        ((xv.row(r).array() - mu) * rstd) * gv.row(0).array() + bv.row(0).array();
  }
  nodes_.back().back = [this, out, x, gain, bias, stats] {
    const Index nr = rows(out), nc = cols(out);
    ConstMatMap g(nodes_[static_cast<std::size_t>(out)].grad, nr, nc);
    auto xv2 = value(x);
    auto gv2 = value(gain);
    MatMap gx = grad_map(x);
    MatMap gg = grad_map(gain);
    MatMap gb = grad_map(bias);
    for (Index r = 0; r < nr; ++r) {
      const double mu = stats[2 * r];
      const double rstd = stats[2 * r + 1];
      RowArr xhat = (xv2.row(r).array() - mu) * rstd;
      RowArr dxhat = g.row(r).array() * gv2.row(0).array();
      const double m1 = dxhat.mean();
      const double m2 = (dxhat * xhat).mean();
      gx.row(r).array() += rstd * (dxhat - m1 - xhat * m2);
      gg.row(0).array() += g.row(r).array() * xhat;
      gb.row(0).array() += g.row(r).array();
    }
  };
  return out;
}

Graph::Id Graph::head_rms_norm(Id x, Id gain, Index n_heads, double eps) {
  check_id(x);
  check_id(gain);
  const Index n = rows(x), c = cols(x);
  if (n_heads < 1 || c % n_heads != 0)
    throw ShapeError("graph.head_rms_norm: cols(x) must be a multiple of n_heads");
  if (rows(gain) != 1 || cols(gain) != c)
    throw ShapeError("graph.head_rms_norm: gain must be 1 x cols(x)");
  const Index hd = c / n_heads;
  Id out = new_node(n, c);
  double* rms = arena_alloc(n * n_heads);
  auto xv = value(x);
  auto gv = value(gain);
  for (Index r = 0; r < n; ++r)
    for (Index h = 0; h < n_heads; ++h) {
      auto u = xv.row(r).segment(h * hd, hd).array();
      const double m = std::sqrt(u.square().mean() + eps);
      rms[r * n_heads + h] = m;
      val_map(out).row(r).segment(h * hd, hd).array() = (u / m) * gv.row(0).segment(h * hd, hd).array();
    }
  nodes_.back().back = [this, out, x, gain, n_heads, hd, rms] {
    const Index nr = rows(out);
    ConstMatMap g(nodes_[static_cast<std::size_t>(out)].grad, nr, cols(out));
    auto xv2 = value(x);
    auto gv2 = value(gain);
    MatMap gx = grad_map(x);
    MatMap gg = grad_map(gain);
    for (Index r = 0; r < nr; ++r)
      for (Index h = 0; h < n_heads; ++h) {
        const double m = rms[r * n_heads + h];
        RowArr uhat = xv2.row(r).segment(h * hd, hd).array() / m;
        RowArr dy = g.row(r).segment(h * hd, hd).array();
        RowArr dyg = dy * gv2.row(0).segment(h * hd, hd).array();
        const double proj = (dyg * uhat).mean();
        gx.row(r).segment(h * hd, hd).array() += (dyg - uhat * proj) / m;
        gg.row(0).segment(h * hd, hd).array() += dy * uhat;
      }
  };
  return out;
}

Graph::Id Graph::gelu(Id x) {
  check_id(x);
  constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;
  constexpr double kInvSqrt2Pi = 0.3989422804014327;  // 1/sqrt(2*pi)
  Id out = new_node(rows(x), cols(x));
  const Node& xn = nodes_[static_cast<std::size_t>(x)];
  double* ov = nodes_.back().val;
  const Index sz = rows(x) * cols(x);
  for (Index i = 0; i < sz; ++i)
    ov[i] = 0.5 * xn.val[i] * (1.0 + std::erf(xn.val[i] * kInvSqrt2));
  nodes_.back().back = [this, out, x, sz] {
    const double* g = nodes_[static_cast<std::size_t>(out)].grad;
    const double* xv = nodes_[static_cast<std::size_t>(x)].val;
    double* gx = grad_of(x);
    for (Index i = 0; i < sz; ++i) {
      const double d = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2)) +
                       xv[i] * kInvSqrt2Pi * std::exp(-0.5 * xv[i] * xv[i]);
      gx[i] += g[i] * d;
    }
  };
  return out;
}

Graph::Id Graph::masked_attention(Id q, Id k, Id v, const AttentionMask& mask,
                                  Index n_heads) {
  check_id(q);
  check_id(k);
  check_id(v);
  const Index n = rows(q), c = cols(q);
  if (rows(k) != n || cols(k) != c || rows(v) != n || cols(v) != c)
    throw ShapeError("graph.masked_attention: q/k/v shapes differ");
  if (mask.size() != n) throw ShapeError("graph.masked_attention: mask size != sequence length");
  if (n_heads < 1 || c % n_heads != 0)
    throw ShapeError("graph.masked_attention: cols must be a multiple of n_heads");
  const Index hd = c / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Id out = new_node(n, c);
  double* probs = arena_alloc(n_heads * n * n);  // row-stochastic per head

  for (Index h = 0; h < n_heads; ++h) {
    ConstStridedMap qh(nodes_[static_cast<std::size_t>(q)].val + h * hd, n, hd,
                       Eigen::OuterStride<>(c));
    ConstStridedMap kh(nodes_[static_cast<std::size_t>(k)].val + h * hd, n, hd,
                       Eigen::OuterStride<>(c));
    ConstStridedMap vh(nodes_[static_cast<std::size_t>(v)].val + h * hd, n, hd,
                       Eigen::OuterStride<>(c));
    MatMap ph(probs + h * n * n, n, n);
    ph.noalias() = scale * (qh * kh.transpose());
    for (Index r = 0; r < n; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < n; ++j)
        if (!mask.blocked(r, j)) mx = std::max(mx, ph(r, j));
      assert(std::isfinite(mx) && "attention row with no visible key");
      double z = 0.0;
      for (Index j = 0; j < n; ++j) {
        if (mask.blocked(r, j)) {
          ph(r, j) = 0.0;
        } else {
          ph(r, j) = std::exp(ph(r, j) - mx);
          z += ph(r, j);
        }
      }
      ph.row(r) /= z;
    }
    StridedMap oh(nodes_[static_cast<std::size_t>(out)].val + h * hd, n, hd,
                  Eigen::OuterStride<>(c));
    oh.noalias() = ph * vh;
  }

  nodes_.back().back = [this, out, q, k, v, n_heads, hd, scale, probs] {
    const Index n2 = rows(out), c2 = cols(out);
    for (Index h = 0; h < n_heads; ++h) {
      ConstStridedMap qh(nodes_[static_cast<std::size_t>(q)].val + h * hd, n2, hd,
                         Eigen::OuterStride<>(c2));
      ConstStridedMap kh(nodes_[static_cast<std::size_t>(k)].val + h * hd, n2, hd,
                         Eigen::OuterStride<>(c2));
      ConstStridedMap vh(nodes_[static_cast<std::size_t>(v)].val + h * hd, n2, hd,
                         Eigen::OuterStride<>(c2));
      ConstStridedMap gh(nodes_[static_cast<std::size_t>(out)].grad + h * hd, n2, hd,
                         Eigen::OuterStride<>(c2));
      ConstMatMap ph(probs + h * n2 * n2, n2, n2);
      StridedMap gq(grad_of(q) + h * hd, n2, hd, Eigen::OuterStride<>(c2));
      StridedMap gk(grad_of(k) + h * hd, n2, hd, Eigen::OuterStride<>(c2));
      StridedMap gv(grad_of(v) + h * hd, n2, hd, Eigen::OuterStride<>(c2));

      gv.noalias() += ph.transpose() * gh;
      EigenRowMat dp(n2, n2);
      dp.noalias() = gh * vh.transpose();
      // Softmax backward; blocked entries carry p == 0 and drop out.
      Eigen::ArrayXd rowdot = (dp.array() * ph.array()).rowwise().sum();
      EigenRowMat ds = (ph.array() * (dp.array().colwise() - rowdot)).matrix();
      gq.noalias() += scale * (ds * kh);
      gk.noalias() += scale * (ds.transpose() * qh);
    }
  };
  return out;
}

Graph::Id Graph::rows_lookup(Id table, const std::vector<Index>& ids) {
  check_id(table);
  if (ids.empty()) throw ShapeError("graph.rows_lookup: no ids");
  for (Index i : ids)
    if (i < 0 || i >= rows(table))
      throw ParameterError("graph.rows_lookup: id " + std::to_string(i) + " out of range [0, " +
                           std::to_string(rows(table)) + ")");
  Id out = new_node(static_cast<Index>(ids.size()), cols(table));
  for (std::size_t r = 0; r < ids.size(); ++r)
    val_map(out).row(static_cast<Index>(r)) = value(table).row(ids[r]);
  nodes_.back().back = [this, out, table, ids] {
    ConstMatMap g(nodes_[static_cast<std::size_t>(out)].grad, rows(out), cols(out));
    MatMap gt = grad_map(table);
    for (std::size_t r = 0; r < ids.size(); ++r)
      gt.row(ids[r]) += g.row(static_cast<Index>(r));
  };
  return out;
}

Graph::Id Graph::weighted_mse(Id pred, const Mat& target, const std::vector<double>& row_weights,
                              double scale) {
  check_id(pred);
  const Index n = rows(pred), c = cols(pred);
  if (target.rows() != n || target.cols() != c)
    throw ShapeError("graph.weighted_mse: target shape mismatch");
  if (static_cast<Index>(row_weights.size()) != n)
    throw ShapeError("graph.weighted_mse: row_weights length must equal rows(pred)");

  double* tgt = arena_alloc(n * c);
  std::memcpy(tgt, target.data(), static_cast<std::size_t>(n * c) * sizeof(double));
  double* w = arena_alloc(n);
  std::memcpy(w, row_weights.data(), static_cast<std::size_t>(n) * sizeof(double));

  Id out = new_node(1, 1);
  ConstMatMap tv(tgt, n, c);
  double acc = 0.0;
  for (Index r = 0; r < n; ++r)
    acc += w[r] * (value(pred).row(r) - tv.row(r)).squaredNorm();
  val_map(out)(0, 0) = scale * acc;

  nodes_.back().back = [this, out, pred, tgt, w, scale] {
    const double g = nodes_[static_cast<std::size_t>(out)].grad[0];
    const Index nr = rows(pred), nc = cols(pred);
    ConstMatMap tv2(tgt, nr, nc);
    MatMap gp = grad_map(pred);
    for (Index r = 0; r < nr; ++r)
      gp.row(r) += (2.0 * g * scale * w[r]) * (value(pred).row(r) - tv2.row(r));
  };
  return out;
}

void Graph::backward(Id loss) {
  check_id(loss);
  Node& ln = nodes_[static_cast<std::size_t>(loss)];
  if (ln.rows != 1 || ln.cols != 1) throw ShapeError("graph.backward: loss must be 1 x 1");
  grad_of(loss)[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    // Nodes whose gradient buffer was never touched are off the loss path.
    if (n.back && n.grad) n.back();
  }
  for (Id p : param_nodes_) {
    Node& n = nodes_[static_cast<std::size_t>(p)];
    if (n.grad && n.sink)
      n.sink->map() += ConstMatMap(n.grad, n.rows, n.cols);
  }
}

}  // namespace cf
