#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hdv/error.hpp"
#include "hdv/kdtree.hpp"
#include "hdv/model.hpp"
#include "hdv/train.hpp"

// Whole-scene inference: tile the cloud with spheres of the training size,
// run the network per sphere, and fuse per-point class distributions with
// weights that fall off linearly from each sphere's center.

namespace hdv {

constexpr double kMinFuseWeight = 1e-3;

struct SphereJob {
  int center = -1;
  std::vector<int> members;  // ascending
  Vec3 center_pos{};
};

// Greedy cover: draw an uncovered point uniformly, emit its n1 nearest
// neighbours as one job, repeat until nothing is uncovered.
inline std::vector<SphereJob> plan_spheres(const PointCloud& cloud, int n1, uint64_t seed) {
  const int n = static_cast<int>(cloud.size());
  if (n1 < 1) throw ContractError("sphere size must be positive");
  if (n1 > n)
    throw TargetTooLarge("sphere size " + std::to_string(n1) + " exceeds cloud size " +
                         std::to_string(n));
  SpatialIndex index(cloud.pos);
  Rng rng(seed);
  std::vector<uint8_t> covered(n, 0);
  int remaining = n;
  std::vector<SphereJob> jobs;
  while (remaining > 0) {
    int r = static_cast<int>(rng.next_below(static_cast<uint64_t>(remaining)));
    int seed_idx = -1;
    for (int i = 0; i < n; ++i)
      if (!covered[i] && r-- == 0) {
        seed_idx = i;
        break;
      }
    SphereJob job;
    job.center = seed_idx;
    job.center_pos = cloud.pos[seed_idx];
    std::vector<double> d2;
    index.query(cloud.pos[seed_idx], n1, -1, job.members, d2);
    std::sort(job.members.begin(), job.members.end());
    for (int i : job.members)
      if (!covered[i]) {
        covered[i] = 1;
        --remaining;
      }
    jobs.push_back(std::move(job));
  }
  return jobs;
}

namespace detail {

inline void softmax_row(const double* in, double* out, int k) {
  double mx = in[0];
  for (int c = 1; c < k; ++c) mx = std::max(mx, in[c]);
  double sum = 0.0;
  for (int c = 0; c < k; ++c) {
    out[c] = std::exp(in[c] - mx);
    sum += out[c];
  }
  for (int c = 0; c < k; ++c) out[c] /= sum;
}

}  // namespace detail

// Linear falloff from the sphere center, floored so rim points keep a vote.
inline double fuse_weight(double dist, double max_dist) {
  if (max_dist <= 0.0) return 1.0;
  return std::max(1.0 - dist / max_dist, kMinFuseWeight);
}

// Adds one sphere's weighted class distributions into the global tallies.
// probs holds one softmax row per member, in member order.
inline void accumulate_sphere_votes(Mat& votes, std::vector<double>& weight_sum,
                                    const SphereJob& job, const std::vector<Vec3>& pos,
                                    const Mat& probs) {
  const int m = static_cast<int>(job.members.size());
  if (probs.rows != m || votes.cols != probs.cols)
    throw ContractError("vote matrix shape mismatch");
  double max_dist = 0.0;
  std::vector<double> dist(m);
  for (int i = 0; i < m; ++i) {
    dist[i] = (pos[job.members[i]] - job.center_pos).norm();
    max_dist = std::max(max_dist, dist[i]);
  }
  for (int i = 0; i < m; ++i) {
    const double w = fuse_weight(dist[i], max_dist);
    double* acc = votes.row(job.members[i]);
    const double* p = probs.row(i);
    for (int c = 0; c < votes.cols; ++c) acc[c] += w * p[c];
    weight_sum[job.members[i]] += w;
  }
}

// Argmax per row; ties resolve to the lower class index.
inline std::vector<uint16_t> predictions_from_votes(const Mat& votes,
                                                    const std::vector<double>& weight_sum) {
  std::vector<uint16_t> pred(votes.rows);
  for (int i = 0; i < votes.rows; ++i) {
    if (weight_sum[i] <= 0.0) throw ContractError("point left uncovered by sphere plan");
    const double* acc = votes.row(i);
    int best = 0;
    for (int c = 1; c < votes.cols; ++c)
      if (acc[c] > acc[best]) best = c;
    pred[i] = static_cast<uint16_t>(best);
  }
  return pred;
}

enum class InferMode { final_classifier, tco };

inline InferMode infer_mode_from_string(const std::string& s) {
  if (s == "final") return InferMode::final_classifier;
  if (s == "tco") return InferMode::tco;
  throw ValidationError("inference mode must be final or tco");
}

struct SegmentationResult {
  std::vector<uint16_t> pred;
  Mat votes;  // accumulated weighted probabilities, n x classes
};

inline SegmentationResult segment_cloud(const HdvModel& model, const TrainScene& scene,
                                        const StateThresholds& st, InferMode mode,
                                        uint64_t seed) {
  const HdvConfig& cfg = model.config();
  const int n = static_cast<int>(scene.cloud.size());
  const int k = cfg.classes;
  const int L = cfg.levels();
  Rng rng(seed);

  auto jobs = plan_spheres(scene.cloud, cfg.counts[0], rng.fork(1).next_u64());
  Rng pyramid_rng = rng.fork(2);

  SegmentationResult res;
  res.votes = Mat(n, k);
  std::vector<double> weight_sum(n, 0.0);

  for (size_t j = 0; j < jobs.size(); ++j) {
    const auto& job = jobs[j];
    NetInput in = detail::sphere_input(scene, job.members, cfg, st, pyramid_rng.fork(j));
    Tape t;
    auto fwd = model.forward(t, in, mode == InferMode::tco, mode == InferMode::final_classifier);

    // Up-chains land every base-level row on its routed head's resolution.
    std::vector<std::vector<int>> route;
    if (mode == InferMode::tco)
      for (int a = 1; a <= L - 1; ++a) route.push_back(HdvModel::compose_up(in, a));

    const int m = static_cast<int>(job.members.size());
    Mat probs(m, k);
    for (int i = 0; i < m; ++i) {
      const Mat* logits;
      int row;
      if (mode == InferMode::final_classifier) {
        logits = &t.g.val(fwd.final_logits);
        row = i;
      } else {
        const int a = std::clamp(std::min(in.level[0].state[i], 4), 1, L - 1);
        logits = &t.g.val(fwd.heads[a - 1]);
        row = route[a - 1][i];
      }
      detail::softmax_row(logits->row(row), probs.row(i), k);
    }
    accumulate_sphere_votes(res.votes, weight_sum, job, scene.cloud.pos, probs);
  }

  res.pred = predictions_from_votes(res.votes, weight_sum);
  return res;
}

// Each original point takes the prediction of its nearest processed point.
inline std::vector<uint16_t> upsample_predictions(const PointCloud& processed,
                                                  const PointCloud& original,
                                                  const std::vector<uint16_t>& pred) {
  if (processed.size() == 0) throw ContractError("processed cloud is empty");
  if (pred.size() != processed.size()) throw ContractError("prediction count mismatch");
  SpatialIndex index(processed.pos);
  std::vector<uint16_t> out(original.size());
  for (size_t i = 0; i < original.size(); ++i) out[i] = pred[index.nearest(original.pos[i])];
  return out;
}

}  // namespace hdv
