#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "hdv/cloud.hpp"
#include "hdv/density.hpp"
#include "hdv/error.hpp"
#include "hdv/kdtree.hpp"
#include "hdv/rng.hpp"

// Scan-line-preserving subsampling. A point in density group delta_p asked to
// match a sparser target group delta_t keeps only every 2^(delta_t-delta_p)th
// scan row and column; points already at or below the target density are
// never dropped.

namespace hdv {

inline bool ds_lidar_keep(uint32_t scan_row, uint32_t scan_col, int delta_p, int delta_t) {
  const int gap = delta_t - delta_p;
  if (gap <= 0) return true;
  if (gap >= 32) return scan_row == 0 && scan_col == 0;
  const uint32_t step = 1u << gap;
  return scan_row % step == 0 && scan_col % step == 0;
}

namespace detail {

// Smallest target group at which the point is dropped, or -1 if it survives
// every target up to delta_filter.
inline int first_fail_target(uint32_t row, uint32_t col, int delta_p, int delta_filter) {
  for (int t = delta_p + 1; t <= delta_filter; ++t)
    if (!ds_lidar_keep(row, col, delta_p, t)) return t;
  return -1;
}

}  // namespace detail

// Group-target mode: apply the keep rule against a fixed target group.
inline std::vector<int> lidar_grid_subsample(const PointCloud& cloud,
                                             const std::vector<int>& groups,
                                             int delta_target) {
  if (!cloud.has_scan_grid()) throw MetadataRequired("scan grid needed for grid subsampling");
  if (groups.size() != cloud.size()) throw ContractError("group count != point count");
  std::vector<int> keep;
  for (size_t i = 0; i < cloud.size(); ++i)
    if (ds_lidar_keep(cloud.scan_row[i], cloud.scan_col[i], groups[i], delta_target))
      keep.push_back(static_cast<int>(i));
  return keep;
}

// Count-target mode. Points are partitioned into tiers by the first target
// group that drops them (survivors of every target form the most resilient
// tier). Whole tiers are re-added most resilient first while they fit; the
// boundary tier contributes a uniform seeded draw so exactly target_count
// indices come back, ascending.
inline std::vector<int> lidar_grid_subsample(const PointCloud& cloud,
                                             const std::vector<int>& groups,
                                             size_t target_count, Rng& rng) {
  const size_t n = cloud.size();
  if (target_count > n)
    throw TargetTooLarge("target " + std::to_string(target_count) + " > cloud size " +
                         std::to_string(n));
  if (target_count == n) {
    std::vector<int> all(n);
    for (size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
    return all;
  }
  if (!cloud.has_scan_grid()) throw MetadataRequired("scan grid needed for grid subsampling");
  if (groups.size() != n) throw ContractError("group count != point count");

  int delta_filter = 0;
  for (int g : groups) delta_filter = std::max(delta_filter, g);

  // tiers[0] holds the never-dropped points; tiers[t] those first dropped at
  // target t. Iteration order below is tiers[0], then t = delta_filter .. 1.
  std::vector<std::vector<int>> tiers(delta_filter + 1);
  for (size_t i = 0; i < n; ++i) {
    const int f = detail::first_fail_target(cloud.scan_row[i], cloud.scan_col[i], groups[i],
                                            delta_filter);
    tiers[f < 0 ? 0 : f].push_back(static_cast<int>(i));
  }

  std::vector<int> keep;
  keep.reserve(target_count);
  auto take_from = [&](std::vector<int>& tier) {
    const size_t room = target_count - keep.size();
    if (room == 0) return;
    if (tier.size() <= room) {
      keep.insert(keep.end(), tier.begin(), tier.end());
    } else {
      rng.shuffle(tier);
      keep.insert(keep.end(), tier.begin(), tier.begin() + room);
    }
  };
  take_from(tiers[0]);
  for (int t = delta_filter; t >= 1; --t) take_from(tiers[t]);

  std::sort(keep.begin(), keep.end());
  return keep;
}

// Uniform fallback when no scan grid exists. Ascending index order.
inline std::vector<int> random_subsample(size_t n, size_t target_count, Rng& rng) {
  if (target_count > n)
    throw TargetTooLarge("target " + std::to_string(target_count) + " > cloud size " +
                         std::to_string(n));
  std::vector<int> all(n);
  for (size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
  rng.shuffle(all);
  all.resize(target_count);
  std::sort(all.begin(), all.end());
  return all;
}

// Nested point pyramid P^(1)..P^(L), neighbour tables, and upsampling maps.
struct Pyramid {
  // idx[l]: absolute indices into the source cloud, ascending. rel[l]:
  // position of each level-(l+1) point within level l's list (rel[0] == idx[0]).
  std::vector<std::vector<int>> idx;
  std::vector<std::vector<int>> rel;
  std::vector<NeighborTable> nbr;
  std::vector<int> k_used;
  // up_map[l]: for each point of level l, the nearest point of level l+1
  // (local index). Sized levels-1.
  std::vector<std::vector<int>> up_map;

  int levels() const { return static_cast<int>(idx.size()); }
  int count(int level) const { return static_cast<int>(idx[level].size()); }
};

inline Pyramid build_pyramid(const PointCloud& cloud, const std::vector<int>& groups,
                             const std::vector<int>& counts, int k, uint64_t seed) {
  if (counts.empty()) throw ContractError("pyramid needs at least one level");
  for (size_t l = 0; l < counts.size(); ++l) {
    if (counts[l] < 2) throw ContractError("pyramid level counts must be >= 2");
    if (l && counts[l] >= counts[l - 1])
      throw ContractError("pyramid level counts must be strictly decreasing");
  }
  if (static_cast<size_t>(counts[0]) > cloud.size())
    throw TargetTooLarge("pyramid base " + std::to_string(counts[0]) + " > cloud size " +
                         std::to_string(cloud.size()));

  Rng rng(seed);
  const bool grid = cloud.has_scan_grid();
  Pyramid py;
  PointCloud level_cloud = cloud;
  std::vector<int> level_groups = groups;
  std::vector<int> abs_prev;  // absolute indices of the current level_cloud
  for (size_t i = 0; i < cloud.size(); ++i) abs_prev.push_back(static_cast<int>(i));

  for (size_t l = 0; l < counts.size(); ++l) {
    Rng draw = rng.fork(l + 1);
    std::vector<int> rel = grid ? lidar_grid_subsample(level_cloud, level_groups,
                                                       static_cast<size_t>(counts[l]), draw)
                                : random_subsample(level_cloud.size(),
                                                   static_cast<size_t>(counts[l]), draw);
    std::vector<int> abs(rel.size());
    for (size_t i = 0; i < rel.size(); ++i) abs[i] = abs_prev[rel[i]];

    level_cloud = level_cloud.select(rel);
    std::vector<int> next_groups(rel.size());
    for (size_t i = 0; i < rel.size(); ++i) next_groups[i] = level_groups[rel[i]];
    level_groups = std::move(next_groups);

    const int n_l = static_cast<int>(level_cloud.size());
    const int k_l = std::min(k, n_l - 1);
    SpatialIndex index(level_cloud.pos);
    py.idx.push_back(abs);
    py.rel.push_back(std::move(rel));
    py.nbr.push_back(knn(index, k_l));
    py.k_used.push_back(k_l);
    abs_prev = abs;
  }

  // Upsampling maps: nearest coarse point for every fine point.
  for (int l = 0; l + 1 < py.levels(); ++l) {
    std::vector<Vec3> coarse;
    coarse.reserve(py.idx[l + 1].size());
    for (int a : py.idx[l + 1]) coarse.push_back(cloud.pos[a]);
    SpatialIndex ci(coarse);
    std::vector<int> m(py.idx[l].size());
    for (size_t i = 0; i < py.idx[l].size(); ++i)
      m[i] = ci.nearest(cloud.pos[py.idx[l][i]]);
    py.up_map.push_back(std::move(m));
  }
  return py;
}

}  // namespace hdv
