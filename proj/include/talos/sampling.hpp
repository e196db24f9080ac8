#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "quantile.hpp"
#include "random.hpp"

namespace talos {

/// Reusable scratch for drawing uniform negatives without replacement.
class NegativeSampler {
 public:
  explicit NegativeSampler(std::size_t num_items = 0) : stamp_(num_items, 0) {}

  /// Draws `count` distinct items outside `positives` (sorted) into `out`.
  void draw(std::span<const Index> positives, std::size_t count, Rng& rng,
            std::vector<Index>& out) {
    const std::size_t n_items = stamp_.size();
    const std::size_t n_neg = n_items - positives.size();
    if (count > n_neg)
      throw std::invalid_argument("sample_negatives: count " + std::to_string(count) +
                                  " exceeds the " + std::to_string(n_neg) +
                                  " available negatives");
    out.clear();
    if (count == 0) return;
    if (2 * count <= n_neg) {
      // Rejection against a generation stamp marking positives and accepted draws.
      if (++gen_ == 0) {
        std::fill(stamp_.begin(), stamp_.end(), 0);
        gen_ = 1;
      }
      for (Index p : positives) stamp_[p] = gen_;
      while (out.size() < count) {
        const auto j = static_cast<Index>(rng.below(n_items));
        if (stamp_[j] == gen_) continue;
        stamp_[j] = gen_;
        out.push_back(j);
      }
      return;
    }
    pool_.clear();
    auto p = positives.begin();
    for (Index j = 0; j < n_items; ++j) {
      if (p != positives.end() && *p == j) {
        ++p;
        continue;
      }
      pool_.push_back(j);
    }
    for (std::size_t k = 0; k < count; ++k) {
      const auto r = k + rng.below(pool_.size() - k);
      std::swap(pool_[k], pool_[r]);
    }
    out.assign(pool_.begin(), pool_.begin() + static_cast<std::ptrdiff_t>(count));
  }

 private:
  std::vector<std::uint32_t> stamp_;
  std::uint32_t gen_ = 0;
  std::vector<Index> pool_;
};

/// Uniform sample G_u from the user's non-train-positive items, with importance
/// weight w_u = (|I| - |P_u|) / |G_u|.
inline NegativeSample sample_negatives(const InteractionDataset& data, Index user,
                                       std::size_t count, Rng& rng) {
  if (count == 0) throw std::invalid_argument("sample_negatives: count must be >= 1");
  const auto pos = data.positives(Split::train, user);
  NegativeSampler sampler(data.num_items());
  NegativeSample s;
  s.user = user;
  sampler.draw(pos, count, rng, s.items);
  s.weight = static_cast<double>(data.num_items() - pos.size()) / static_cast<double>(count);
  return s;
}

}  // namespace talos
