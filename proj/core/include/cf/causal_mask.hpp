#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cf/mat.hpp"

namespace cf {

// Boolean attention visibility for one assembled sequence.
// blocked(q, k) == true means query row q must not attend key column k.
//
// Sequence layout for S AR groups of sizes k_1..k_S:
//   [condition rows] [clean groups 1..S-1] [noisy groups 1..S]
// (the final group's clean tokens never serve as context). Visibility:
//   clean group i sees clean groups <= i,
//   noisy group s sees clean groups < s plus itself (bidirectional),
//   condition columns are visible to every row; condition rows see only
//   condition columns.
class AttentionMask {
 public:
  // Region form of the same structure. clean_prefix[j] is the number of
  // leading clean groups visible to noisy group j; the standard mask has
  // clean_prefix[j] == j, and repeated or single-step variants differ.
  struct Descriptor {
    Index n_cond = 0;
    std::vector<Index> clean_sizes;
    std::vector<Index> noisy_sizes;
    std::vector<Index> clean_prefix;
  };

  AttentionMask() = default;
  AttentionMask(Index size, bool blocked_fill);

  Index size() const { return size_; }
  bool blocked(Index q, Index k) const {
    return blocked_[static_cast<std::size_t>(q * size_ + k)] != 0;
  }
  void set_blocked(Index q, Index k, bool b) {
    blocked_[static_cast<std::size_t>(q * size_ + k)] = b ? 1 : 0;
  }

  const std::optional<Descriptor>& descriptor() const { return descriptor_; }
  void set_descriptor(Descriptor d) { descriptor_ = std::move(d); }

  friend bool operator==(const AttentionMask& a, const AttentionMask& b) {
    return a.size_ == b.size_ && a.blocked_ == b.blocked_;
  }

 private:
  Index size_ = 0;
  std::vector<std::uint8_t> blocked_;
  std::optional<Descriptor> descriptor_;
};

// Training mask for the sequence layout above, built by region fills.
// Carries the equivalent descriptor.
AttentionMask build_mask(const std::vector<Index>& group_sizes);

// Variant with each noisy group duplicated `repeat` times consecutively
// (copies of group s are mutually invisible, each sees clean groups < s
// and itself). repeat == 1 reproduces build_mask exactly.
AttentionMask build_mask_repeated(const std::vector<Index>& group_sizes, Index repeat);

// Mask over [condition][clean groups 1..n] only: rows for cached-context
// precomputation during sampling.
AttentionMask build_context_mask(const std::vector<Index>& clean_sizes);

// One sampling step: clean groups 1..step as context plus the single
// noisy group being denoised, which sees all of them and itself.
AttentionMask build_step_mask(const std::vector<Index>& clean_sizes, Index noisy_size);

// Adds n_cond condition rows/columns in front. Never unblocks an existing
// pair. The descriptor is kept only if the input had no condition rows.
AttentionMask prepend_condition(const AttentionMask& mask, Index n_cond);

// Rebuilds the dense matrix from a descriptor by the per-pair visibility
// rule; must agree with the region-fill construction bit for bit.
AttentionMask dense_from_descriptor(const AttentionMask::Descriptor& d);

// Text rendering, one glyph per pair: middle dot = visible, full block =
// blocked, single spaces between columns, one line per row.
std::string render_mask(const AttentionMask& mask);

}  // namespace cf
