#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "hdv/cloud.hpp"
#include "hdv/error.hpp"
#include "hdv/kdtree.hpp"
#include "hdv/rng.hpp"

// Per-point density from the k-th neighbour radius, the quartering ladder of
// density-group thresholds, and the six density-state thresholds calibrated
// against a training distribution. States: 0 is denser than t_0 (reporting
// tier), 1..5 are the working states, sparsest last; t_5 is pinned at 0.

namespace hdv {

inline constexpr double kDefaultT0 = 2.0e6;  // points per cubic metre
inline constexpr int kDefaultDeltaMax = 17;
inline constexpr int kNumStates = 5;

struct DensityProfile {
  std::vector<double> rho;
  int k_used = 0;
};

inline DensityProfile estimate_density(const NeighborTable& neighbors) {
  DensityProfile p;
  p.k_used = neighbors.k;
  p.rho.resize(neighbors.n);
  const double c = 4.0 * 3.14159265358979323846 / 3.0;
  for (int i = 0; i < neighbors.n; ++i) {
    const double r = neighbors.radius(i);
    if (r <= 0.0)
      throw DegenerateNeighborhood("zero k-th neighbour radius at point " + std::to_string(i));
    p.rho[i] = neighbors.k / (c * r * r * r);
  }
  return p;
}

// t_delta = t0 / 4^delta for delta = 0..delta_max.
inline std::vector<double> group_thresholds(double t0 = kDefaultT0,
                                            int delta_max = kDefaultDeltaMax) {
  if (t0 <= 0 || delta_max < 1) throw ContractError("group_thresholds needs t0 > 0, delta_max >= 1");
  std::vector<double> t(delta_max + 1);
  t[0] = t0;
  for (int d = 1; d <= delta_max; ++d) t[d] = t[d - 1] / 4.0;
  return t;
}

// Group of a density value: smallest delta with rho > t[delta+1] (upper bound
// inclusive, matching the state convention); values at or below the sparsest
// threshold fall in the last group.
inline int group_of(double rho, const std::vector<double>& thresholds) {
  const int delta_max = static_cast<int>(thresholds.size()) - 1;
  for (int d = 0; d < delta_max; ++d)
    if (rho > thresholds[d + 1]) return d;
  return delta_max;
}

inline std::vector<int> assign_groups(const DensityProfile& profile,
                                      const std::vector<double>& thresholds) {
  std::vector<int> g(profile.rho.size());
  for (size_t i = 0; i < g.size(); ++i) {
    if (!(profile.rho[i] > 0.0))
      throw ValidationError("non-positive density at point " + std::to_string(i));
    g[i] = group_of(profile.rho[i], thresholds);
  }
  return g;
}

struct StateThresholds {
  std::array<double, 6> t{};  // t[0] > t[1] > ... > t[5] == 0
  int k_used = 0;
  int delta_max = kDefaultDeltaMax;
  // log10-density standardization of the calibration distribution, consumed
  // by the attention inputs of the final classifier.
  double rho_log10_mean = 0.0;
  double rho_log10_std = 1.0;

  void validate() const {
    for (int d = 0; d < 5; ++d)
      if (!(t[d] > t[d + 1])) throw ValidationError("state thresholds not strictly decreasing");
    if (t[5] != 0.0) throw ValidationError("t_5 must be 0");
  }
};

// State of a density value: 0 above t_0, else d with t_d < rho <= t_{d-1}.
inline int state_of(double rho, const StateThresholds& st) {
  for (int d = 0; d < 6; ++d)
    if (rho > st.t[d]) return d;
  throw ValidationError("non-positive density has no state");
}

inline std::vector<int> inherent_state(const DensityProfile& profile,
                                       const StateThresholds& st) {
  std::vector<int> s(profile.rho.size());
  for (size_t i = 0; i < s.size(); ++i) s[i] = state_of(profile.rho[i], st);
  return s;
}

// Calibration: pooled training densities; each t_d (d = 0..4) is the lattice
// threshold whose ">= t" count is closest to its target fraction of the pool.
// Fractions arrive strictly decreasing (level-1 target first); since counts
// shrink as thresholds grow, t_0 takes the last (smallest) fraction and t_4
// the first. Ties and successive choices both move toward sparser thresholds
// so the result stays strictly decreasing.
inline StateThresholds calibrate_states(const std::vector<DensityProfile>& profiles,
                                        const std::array<double, 5>& fractions,
                                        double t0 = kDefaultT0,
                                        int delta_max = kDefaultDeltaMax) {
  if (profiles.empty()) throw CalibrationError("no training profiles");
  for (int i = 0; i < 5; ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] <= 1.0))
      throw CalibrationError("target fractions must lie in (0,1]");
    if (i && !(fractions[i] < fractions[i - 1]))
      throw CalibrationError("target fractions must be strictly decreasing");
  }
  std::vector<double> pooled;
  int k_used = 0;
  for (const auto& p : profiles) {
    k_used = p.k_used;
    pooled.insert(pooled.end(), p.rho.begin(), p.rho.end());
  }
  if (pooled.empty()) throw CalibrationError("empty training profiles");
  std::sort(pooled.begin(), pooled.end());
  const double n = static_cast<double>(pooled.size());

  const auto lattice = group_thresholds(t0, delta_max);
  auto count_at_least = [&](double t) {
    return static_cast<double>(pooled.end() -
                               std::lower_bound(pooled.begin(), pooled.end(), t));
  };

  StateThresholds st;
  st.k_used = k_used;
  st.delta_max = delta_max;
  int prev_delta = -1;
  for (int d = 0; d <= 4; ++d) {
    const double target = fractions[4 - d] * n;
    const int hi = delta_max - (4 - d);  // leave room for the remaining states
    int best = -1;
    double best_err = 0;
    for (int delta = prev_delta + 1; delta <= hi; ++delta) {
      const double err = std::abs(count_at_least(lattice[delta]) - target);
      if (best < 0 || err < best_err || (err == best_err && delta > best)) {
        best = delta;
        best_err = err;
      }
    }
    if (best < 0) throw CalibrationError("no lattice threshold left for state " + std::to_string(d));
    st.t[d] = lattice[best];
    prev_delta = best;
  }
  st.t[5] = 0.0;

  double mean = 0;
  for (double r : pooled) mean += std::log10(r);
  mean /= n;
  double var = 0;
  for (double r : pooled) {
    const double d = std::log10(r) - mean;
    var += d * d;
  }
  st.rho_log10_mean = mean;
  st.rho_log10_std = std::max(std::sqrt(var / n), 1e-12);
  st.validate();
  return st;
}

struct HistogramRow {
  int bucket = 0;  // group delta or state d depending on the table
  long count = 0;
  double percent = 0;
};

// Percentage of points per density group; percentages sum to 100.
inline std::vector<HistogramRow> density_histogram(const DensityProfile& profile,
                                                   const std::vector<double>& thresholds) {
  const auto groups = assign_groups(profile, thresholds);
  std::vector<HistogramRow> rows(thresholds.size());
  for (size_t d = 0; d < rows.size(); ++d) rows[d].bucket = static_cast<int>(d);
  for (int g : groups) rows[g].count++;
  const double n = std::max<double>(1.0, static_cast<double>(groups.size()));
  for (auto& r : rows) r.percent = 100.0 * static_cast<double>(r.count) / n;
  return rows;
}

// Deterministic tie-break jitter for exactly coincident points; disabled by
// default (the density estimate raises DegenerateNeighborhood instead).
inline PointCloud jitter_duplicates(const PointCloud& cloud, double eps = 1e-9,
                                    uint64_t seed = 0) {
  PointCloud out = cloud;
  std::vector<int> order(cloud.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const Vec3 &pa = cloud.pos[a], &pb = cloud.pos[b];
    if (pa.x != pb.x) return pa.x < pb.x;
    if (pa.y != pb.y) return pa.y < pb.y;
    if (pa.z != pb.z) return pa.z < pb.z;
    return a < b;
  });
  Rng rng(seed ^ 0x6a09e667f3bcc908ULL);
  for (size_t i = 1; i < order.size(); ++i) {
    const Vec3& prev = cloud.pos[order[i - 1]];
    const Vec3& cur = cloud.pos[order[i]];
    if (prev.x == cur.x && prev.y == cur.y && prev.z == cur.z) {
      Rng child = rng.fork(static_cast<uint64_t>(order[i]));
      Vec3& p = out.pos[order[i]];
      p.x += eps * (child.next_double() * 2 - 1);
      p.y += eps * (child.next_double() * 2 - 1);
      p.z += eps * (child.next_double() * 2 - 1);
    }
  }
  return out;
}

}  // namespace hdv
