#include "cf/causal_mask.hpp"

#include <cassert>
#include <numeric>
#include <string>

#include "cf/error.hpp"

namespace cf {

AttentionMask::AttentionMask(Index size, bool blocked_fill)
    : size_(size),
      blocked_(static_cast<std::size_t>(size * size), blocked_fill ? 1 : 0) {
  if (size < 0) throw ShapeError("AttentionMask: negative size");
}

namespace {

void check_sizes(const std::vector<Index>& sizes, const char* what) {
  if (sizes.empty()) throw ParameterError(std::string(what) + ": must be non-empty");
  for (std::size_t i = 0; i < sizes.size(); ++i)
    if (sizes[i] < 1)
      throw ParameterError(std::string(what) + "[" + std::to_string(i) +
                           "]: group size must be >= 1");
}

void unblock_region(AttentionMask& m, Index r0, Index r1, Index c0, Index c1) {
  for (Index q = r0; q < r1; ++q)
    for (Index k = c0; k < c1; ++k) m.set_blocked(q, k, false);
}

void assert_no_dead_row(const AttentionMask& m) {
#ifndef NDEBUG
  for (Index q = 0; q < m.size(); ++q) {
    bool any = false;
    for (Index k = 0; k < m.size() && !any; ++k) any = !m.blocked(q, k);
    assert(any && "attention mask has a fully blocked row");
  }
#else
  (void)m;
#endif
}

}  // namespace

AttentionMask build_mask_repeated(const std::vector<Index>& group_sizes, Index repeat) {
  check_sizes(group_sizes, "group_sizes");
  if (repeat < 1) throw ParameterError("repeat: must be >= 1");
  const auto S = static_cast<Index>(group_sizes.size());

  // Prefix sums over group sizes; clean context stops before the last group.
  std::vector<Index> sumk(static_cast<std::size_t>(S + 1), 0);
  for (Index s = 0; s < S; ++s) sumk[s + 1] = sumk[s] + group_sizes[static_cast<std::size_t>(s)];
  const Index ctx_len = sumk[S - 1];
  const Index noisy_len = sumk[S] * repeat;

  AttentionMask m(ctx_len + noisy_len, true);
  // Clean rows: group i attends clean groups up to and including itself.
  for (Index i = 0; i + 1 < S; ++i) unblock_region(m, sumk[i], sumk[i + 1], 0, sumk[i + 1]);
  // Noisy rows: copy j of group s attends clean groups before s plus its
  // own copy, bidirectionally. Copies never see each other.
  Index row = ctx_len;
  for (Index s = 0; s < S; ++s) {
    const Index k_s = group_sizes[static_cast<std::size_t>(s)];
    for (Index j = 0; j < repeat; ++j, row += k_s) {
      unblock_region(m, row, row + k_s, 0, sumk[s]);
      unblock_region(m, row, row + k_s, row, row + k_s);
    }
  }
  assert_no_dead_row(m);

  AttentionMask::Descriptor d;
  d.clean_sizes.assign(group_sizes.begin(), group_sizes.end() - 1);
  for (Index s = 0; s < S; ++s)
    for (Index j = 0; j < repeat; ++j) {
      d.noisy_sizes.push_back(group_sizes[static_cast<std::size_t>(s)]);
      d.clean_prefix.push_back(s);
    }
  m.set_descriptor(std::move(d));
  return m;
}

AttentionMask build_mask(const std::vector<Index>& group_sizes) {
  return build_mask_repeated(group_sizes, 1);
}

AttentionMask build_context_mask(const std::vector<Index>& clean_sizes) {
  check_sizes(clean_sizes, "clean_sizes");
  const auto n = static_cast<Index>(clean_sizes.size());
  std::vector<Index> sumk(static_cast<std::size_t>(n + 1), 0);
  for (Index i = 0; i < n; ++i) sumk[i + 1] = sumk[i] + clean_sizes[static_cast<std::size_t>(i)];

  AttentionMask m(sumk[n], true);
  for (Index i = 0; i < n; ++i) unblock_region(m, sumk[i], sumk[i + 1], 0, sumk[i + 1]);
  assert_no_dead_row(m);

  AttentionMask::Descriptor d;
  d.clean_sizes.assign(clean_sizes.begin(), clean_sizes.end());
  m.set_descriptor(std::move(d));
  return m;
}

AttentionMask build_step_mask(const std::vector<Index>& clean_sizes, Index noisy_size) {
  if (noisy_size < 1) throw ParameterError("noisy_size: must be >= 1");
  const auto n = static_cast<Index>(clean_sizes.size());
  std::vector<Index> sumk(static_cast<std::size_t>(n + 1), 0);
  for (Index i = 0; i < n; ++i) {
    if (clean_sizes[static_cast<std::size_t>(i)] < 1)
      throw ParameterError("clean_sizes[" + std::to_string(i) + "]: group size must be >= 1");
    sumk[i + 1] = sumk[i] + clean_sizes[static_cast<std::size_t>(i)];
  }
  const Index ctx_len = sumk[n];

  AttentionMask m(ctx_len + noisy_size, true);
  for (Index i = 0; i < n; ++i) unblock_region(m, sumk[i], sumk[i + 1], 0, sumk[i + 1]);
  unblock_region(m, ctx_len, ctx_len + noisy_size, 0, ctx_len + noisy_size);
  assert_no_dead_row(m);

  AttentionMask::Descriptor d;
  d.clean_sizes.assign(clean_sizes.begin(), clean_sizes.end());
  d.noisy_sizes.push_back(noisy_size);
  d.clean_prefix.push_back(n);
  m.set_descriptor(std::move(d));
  return m;
}

AttentionMask prepend_condition(const AttentionMask& mask, Index n_cond) {
  if (n_cond < 0) throw ParameterError("n_cond: must be >= 0");
  if (n_cond == 0) return mask;
  const Index n = mask.size();
  AttentionMask m(n_cond + n, true);
  // Condition columns are visible to every row; condition rows see only
  // condition columns. Existing visibility is copied with an offset, so
  // no previously blocked pair can open up.
  for (Index q = 0; q < n_cond + n; ++q)
    for (Index k = 0; k < n_cond; ++k) m.set_blocked(q, k, false);
  for (Index q = 0; q < n; ++q)
    for (Index k = 0; k < n; ++k)
      m.set_blocked(n_cond + q, n_cond + k, mask.blocked(q, k));
  assert_no_dead_row(m);

  if (mask.descriptor() && mask.descriptor()->n_cond == 0) {
    AttentionMask::Descriptor d = *mask.descriptor();
    d.n_cond = n_cond;
    m.set_descriptor(std::move(d));
  }
  return m;
}

AttentionMask dense_from_descriptor(const AttentionMask::Descriptor& d) {
  if (d.n_cond < 0) throw ParameterError("descriptor.n_cond: must be >= 0");
  if (d.noisy_sizes.size() != d.clean_prefix.size())
    throw ShapeError("descriptor: noisy_sizes and clean_prefix lengths differ");
  const auto n_clean = static_cast<Index>(d.clean_sizes.size());
  for (Index prefix : d.clean_prefix)
    if (prefix < 0 || prefix > n_clean)
      throw ParameterError("descriptor.clean_prefix: out of range");

  // Group id per row/column: -1 condition, [0, n_clean) clean,
  // n_clean + j for noisy group j.
  std::vector<Index> seg;
  for (Index i = 0; i < d.n_cond; ++i) seg.push_back(-1);
  for (Index g = 0; g < n_clean; ++g)
    for (Index i = 0; i < d.clean_sizes[static_cast<std::size_t>(g)]; ++i) seg.push_back(g);
  for (std::size_t j = 0; j < d.noisy_sizes.size(); ++j)
    for (Index i = 0; i < d.noisy_sizes[j]; ++i)
      seg.push_back(n_clean + static_cast<Index>(j));

  const auto n = static_cast<Index>(seg.size());
  AttentionMask m(n, true);
  for (Index q = 0; q < n; ++q) {
    const Index gq = seg[static_cast<std::size_t>(q)];
    for (Index k = 0; k < n; ++k) {
      const Index gk = seg[static_cast<std::size_t>(k)];
      bool visible;
      if (gq == -1) {
        visible = gk == -1;
      } else if (gk == -1) {
        visible = true;
      } else if (gq < n_clean) {
        visible = gk < n_clean && gk <= gq;
      } else {
        const Index prefix = d.clean_prefix[static_cast<std::size_t>(gq - n_clean)];
        visible = (gk < n_clean && gk < prefix) || gk == gq;
      }
      m.set_blocked(q, k, !visible);
    }
  }
  return m;
}

std::string render_mask(const AttentionMask& mask) {
  std::string out;
  for (Index q = 0; q < mask.size(); ++q) {
    for (Index k = 0; k < mask.size(); ++k) {
      if (k > 0) out += ' ';
      out += mask.blocked(q, k) ? "█" : "·";
    }
    out += '\n';
  }
  return out;
}

}  // namespace cf
