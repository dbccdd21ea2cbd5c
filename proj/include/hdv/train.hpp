#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hdv/density.hpp"
#include "hdv/error.hpp"
#include "hdv/kdtree.hpp"
#include "hdv/model.hpp"
#include "hdv/subsample.hpp"

// Two-stage optimization: the backbone trains against four density-masked
// classifiers with quadratically weighted losses, then everything is locked
// and only the final attention classifier is tuned.

namespace hdv {

struct TrainConfig {
  int epochs = 2;
  int batches_per_epoch = 50;
  int batch_size = 4;
  double lr = 1e-2;
  double lr_decay = 0.95;  // multiplied per epoch
  uint64_t seed = 1;
  std::string weights_mode = "inverse_frequency";  // none | inverse_frequency

  void validate() const {
    if (epochs < 1 || batches_per_epoch < 1 || batch_size < 1)
      throw ValidationError("training counts must be positive");
    if (!(lr >= 0.0) || !(lr_decay > 0.0)) throw ValidationError("bad learning rate schedule");
    if (weights_mode != "none" && weights_mode != "inverse_frequency")
      throw ValidationError("weights_mode must be none or inverse_frequency");
  }
};

struct LossReport {
  std::vector<double> head;      // L_1..L_{levels-1}
  double total = 0.0;
  std::vector<int> masked_counts;
};

inline std::vector<uint8_t> state_mask(const std::vector<int>& states, int a) {
  std::vector<uint8_t> m(states.size());
  for (size_t i = 0; i < m.size(); ++i)
    m[i] = std::min(states[i], 4) <= a ? 1 : 0;
  return m;
}

inline std::vector<double> class_weights(const std::vector<uint16_t>& labels, int classes,
                                         const std::string& mode) {
  std::vector<double> w(classes, 1.0);
  if (mode == "none") return w;
  if (mode != "inverse_frequency") throw ValidationError("unknown class weight mode");
  if (labels.empty()) throw AbsentClass("no labels given");
  std::vector<int64_t> count(classes, 0);
  for (uint16_t l : labels) {
    if (static_cast<int>(l) >= classes) throw ValidationError("label out of range");
    count[l]++;
  }
  double sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    if (count[c] == 0) throw AbsentClass("class " + std::to_string(c) + " absent from labels");
    w[c] = static_cast<double>(labels.size()) / static_cast<double>(count[c]);
    sum += w[c];
  }
  for (double& x : w) x *= classes / sum;  // mean 1
  return w;
}

// Per-head masked losses and their quadratically weighted combination.
struct HeadLossVars {
  std::vector<Var> each;
  Var total;
  std::vector<int> masked_counts;
};

inline HeadLossVars combined_loss(Tape& t, const std::vector<Var>& head_logits,
                                  const std::vector<std::vector<int>>& labels,
                                  const std::vector<std::vector<uint8_t>>& masks,
                                  const std::vector<double>& weights) {
  if (labels.size() != head_logits.size() || masks.size() != head_logits.size())
    throw ContractError("one label/mask set per classifier");
  HeadLossVars out;
  std::vector<std::pair<double, Var>> terms;
  int64_t supervised = 0;
  for (size_t h = 0; h < head_logits.size(); ++h) {
    const int a = static_cast<int>(h) + 1;
    const auto& mask = masks[h];
    for (uint8_t m : mask) supervised += m;
    out.masked_counts.push_back(
        static_cast<int>(std::count(mask.begin(), mask.end(), uint8_t{1})));
    Var l = t.g.softmax_xent(head_logits[h], labels[h], weights, mask);
    out.each.push_back(l);
    terms.push_back({static_cast<double>(a) * a, l});
  }
  if (supervised == 0) throw ZeroSupervision("no classifier has any masked-in point");
  out.total = t.g.weighted_sum(terms);
  return out;
}

// Masks derived from the per-level inherent states.
inline HeadLossVars combined_loss(Tape& t, const std::vector<Var>& head_logits,
                                  const NetInput& in, const std::vector<double>& weights) {
  std::vector<std::vector<int>> labels;
  std::vector<std::vector<uint8_t>> masks;
  for (size_t h = 0; h < head_logits.size(); ++h) {
    const int a = static_cast<int>(h) + 1;
    const auto& lvl = in.level[h];
    if (lvl.label.empty()) throw ContractError("training requires labels at every level");
    labels.push_back(lvl.label);
    masks.push_back(state_mask(lvl.state, a));
  }
  return combined_loss(t, head_logits, labels, masks, weights);
}

// A labeled cloud with its density profile, groups, and inherent states.
struct TrainScene {
  PointCloud cloud;
  std::vector<double> rho;
  std::vector<int> group;
  std::vector<int> state;
};

inline TrainScene prepare_scene(PointCloud cloud, int k, const StateThresholds& st) {
  cloud.validate();
  TrainScene s;
  SpatialIndex index(cloud.pos);
  const int kq = std::min(k, static_cast<int>(cloud.size()) - 1);
  auto nbr = knn(index, kq);
  auto prof = estimate_density(nbr);
  s.group = assign_groups(prof, group_thresholds());
  s.state = inherent_state(prof, st);
  s.rho = std::move(prof.rho);
  s.cloud = std::move(cloud);
  return s;
}

// Uniform draws over this epoch's not-yet-covered points; each draw yields
// the seed's n1 nearest members (seed included).
class SphereSampler {
 public:
  SphereSampler(const PointCloud& cloud, int n1, Rng rng)
      : cloud_(&cloud), index_(cloud.pos), n1_(n1), rng_(std::move(rng)) {
    if (n1 < 1) throw ContractError("sphere size must be positive");
    if (static_cast<size_t>(n1) > cloud.size())
      throw TargetTooLarge("sphere size " + std::to_string(n1) + " exceeds cloud size " +
                           std::to_string(cloud.size()));
    reset();
  }

  void reset() {
    covered_.assign(cloud_->size(), 0);
    remaining_ = static_cast<int>(cloud_->size());
  }

  bool exhausted() const { return remaining_ == 0; }

  // Members ascending; covers them.
  std::vector<int> next() {
    if (remaining_ == 0) reset();
    int r = static_cast<int>(rng_.next_below(static_cast<uint64_t>(remaining_)));
    int seed = -1;
    for (size_t i = 0; i < covered_.size(); ++i)
      if (!covered_[i] && r-- == 0) {
        seed = static_cast<int>(i);
        break;
      }
    std::vector<int> idx;
    std::vector<double> d2;
    index_.query(cloud_->pos[seed], n1_, -1, idx, d2);
    std::sort(idx.begin(), idx.end());
    for (int i : idx)
      if (!covered_[i]) {
        covered_[i] = 1;
        --remaining_;
      }
    last_seed_ = seed;
    return idx;
  }

  int last_seed() const { return last_seed_; }

 private:
  const PointCloud* cloud_;
  SpatialIndex index_;
  int n1_;
  Rng rng_;
  std::vector<uint8_t> covered_;
  int remaining_ = 0;
  int last_seed_ = -1;
};

namespace detail {

inline NetInput sphere_input(const TrainScene& s, const std::vector<int>& members,
                             const HdvConfig& cfg, const StateThresholds& st, Rng rng) {
  PointCloud sub = s.cloud.select(members);
  std::vector<double> rho(members.size());
  std::vector<int> group(members.size()), state(members.size());
  for (size_t i = 0; i < members.size(); ++i) {
    rho[i] = s.rho[members[i]];
    group[i] = s.group[members[i]];
    state[i] = s.state[members[i]];
  }
  Pyramid py = build_pyramid(sub, group, cfg.counts, cfg.k_neighbors, rng.next_u64());
  return make_net_input(sub, rho, state, py, st, cfg);
}

inline void append_metrics(std::ostream* out, int step, const std::vector<double>& head,
                           double total, double lr, const char* total_key) {
  if (!out) return;
  std::ostringstream line;
  line.precision(17);
  line << "{\"step\":" << step;
  for (size_t i = 0; i < head.size(); ++i) line << ",\"L_" << (i + 1) << "\":" << head[i];
  line << ",\"" << total_key << "\":" << total << ",\"lr\":" << lr << "}";
  *out << line.str() << "\n";
  out->flush();
}

// True when some classifier level has at least one masked-in point.
inline bool any_supervised(const NetInput& in, int heads) {
  for (int h = 0; h < heads; ++h)
    for (int s : in.level[h].state)
      if (std::min(s, 4) <= h + 1) return true;
  return false;
}

// Pooled labels across scenes, for class weighting.
inline std::vector<uint16_t> pooled_labels(const std::vector<TrainScene>& scenes) {
  std::vector<uint16_t> all;
  for (const auto& s : scenes) {
    if (!s.cloud.has_labels()) throw MetadataRequired("training cloud has no labels");
    all.insert(all.end(), s.cloud.label.begin(), s.cloud.label.end());
  }
  return all;
}

}  // namespace detail

// Stage 1: Adam on everything except the final classifier. Each sphere draws
// its scene uniformly, then a seed point uncovered this epoch within it.
inline LossReport train_backbone(const HdvModel& model, ParamStore& ps,
                                 const std::vector<TrainScene>& scenes,
                                 const StateThresholds& st, const TrainConfig& tc,
                                 std::ostream* metrics = nullptr) {
  tc.validate();
  const HdvConfig& cfg = model.config();
  if (scenes.empty()) throw ContractError("no training scenes");
  auto weights = class_weights(detail::pooled_labels(scenes), cfg.classes, tc.weights_mode);

  ps.set_locked("final.", true);
  Adam adam;
  Rng rng(tc.seed);
  std::vector<SphereSampler> samplers;
  for (size_t i = 0; i < scenes.size(); ++i)
    samplers.emplace_back(scenes[i].cloud, cfg.counts[0], rng.fork(100 + i));
  Rng pyramid_rng = rng.fork(2);
  Rng scene_rng = rng.fork(3);

  LossReport rep;
  int step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (auto& s : samplers) s.reset();
    const double lr = tc.lr * std::pow(tc.lr_decay, epoch);
    for (int b = 0; b < tc.batches_per_epoch; ++b) {
      ps.zero_grads();
      rep = LossReport{};
      rep.head.assign(cfg.levels() - 1, 0.0);
      rep.masked_counts.assign(cfg.levels() - 1, 0);
      for (int s = 0; s < tc.batch_size; ++s) {
        // A sphere whose every pyramid level masks out all points carries no
        // gradient; redraw. Only a dataset with no supervisable sphere throws.
        NetInput in;
        for (int attempt = 0;; ++attempt) {
          if (attempt == 256)
            throw ZeroSupervision("no sphere with supervisable points after 256 draws");
          const size_t sc = scenes.size() > 1 ? scene_rng.next_below(scenes.size()) : 0;
          auto members = samplers[sc].next();
          in = detail::sphere_input(
              scenes[sc], members, cfg, st,
              pyramid_rng.fork(static_cast<uint64_t>(step) * 1000003u + s));
          if (detail::any_supervised(in, cfg.levels() - 1)) break;
        }
        Tape t;
        auto fwd = model.forward(t, in, true, false);
        auto loss = combined_loss(t, fwd.heads, in, weights);
        t.backward_accumulate(loss.total, 1.0 / tc.batch_size);
        for (size_t h = 0; h < loss.each.size(); ++h) {
          rep.head[h] += t.g.val(loss.each[h])(0, 0) / tc.batch_size;
          rep.masked_counts[h] += loss.masked_counts[h];
        }
        rep.total += t.g.val(loss.total)(0, 0) / tc.batch_size;
      }
      if (!std::isfinite(rep.total))
        throw DivergedError("loss not finite at step " + std::to_string(step));
      adam.step(ps, lr);
      ++step;
      detail::append_metrics(metrics, step, rep.head, rep.total, lr, "L_total");
    }
  }
  ps.set_locked("final.", false);
  return rep;
}

inline LossReport train_backbone(const HdvModel& model, ParamStore& ps, const TrainScene& scene,
                                 const StateThresholds& st, const TrainConfig& tc,
                                 std::ostream* metrics = nullptr) {
  return train_backbone(model, ps, std::vector<TrainScene>{scene}, st, tc, metrics);
}

// Stage 2: lock everything, tune only the final classifier with a plain
// class-weighted cross entropy over every base-level point. With fco the
// whole network trains from scratch against that same loss.
inline LossReport finetune_final(const HdvModel& model, ParamStore& ps,
                                 const std::vector<TrainScene>& scenes,
                                 const StateThresholds& st, const TrainConfig& tc,
                                 const std::string& checkpoint_stage, bool fco = false,
                                 std::ostream* metrics = nullptr) {
  tc.validate();
  const HdvConfig& cfg = model.config();
  if (scenes.empty()) throw ContractError("no training scenes");
  if (!fco && checkpoint_stage != "backbone" && checkpoint_stage != "finetuned")
    throw ContractError("finetune requires a trained backbone checkpoint");
  auto weights = class_weights(detail::pooled_labels(scenes), cfg.classes, tc.weights_mode);

  if (!fco) {
    ps.lock_all(true);
    ps.set_locked("final.", false);
  }
  Adam adam;
  Rng rng(tc.seed);
  std::vector<SphereSampler> samplers;
  for (size_t i = 0; i < scenes.size(); ++i)
    samplers.emplace_back(scenes[i].cloud, cfg.counts[0], rng.fork(100 + i));
  Rng pyramid_rng = rng.fork(2);
  Rng scene_rng = rng.fork(3);

  LossReport rep;
  int step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (auto& s : samplers) s.reset();
    const double lr = tc.lr * std::pow(tc.lr_decay, epoch);
    for (int b = 0; b < tc.batches_per_epoch; ++b) {
      ps.zero_grads();
      rep = LossReport{};
      for (int s = 0; s < tc.batch_size; ++s) {
        const size_t sc = scenes.size() > 1 ? scene_rng.next_below(scenes.size()) : 0;
        auto members = samplers[sc].next();
        NetInput in = detail::sphere_input(
            scenes[sc], members, cfg, st,
            pyramid_rng.fork(static_cast<uint64_t>(step) * 1000003u + s));
        Tape t;
        auto fwd = model.forward(t, in, false, true);
        const auto& lvl = in.level[0];
        std::vector<uint8_t> all(lvl.label.size(), 1);
        Var loss = t.g.softmax_xent(fwd.final_logits, lvl.label, weights, all);
        t.backward_accumulate(loss, 1.0 / tc.batch_size);
        rep.total += t.g.val(loss)(0, 0) / tc.batch_size;
      }
      if (!std::isfinite(rep.total))
        throw DivergedError("loss not finite at step " + std::to_string(step));
      adam.step(ps, lr);
      ++step;
      detail::append_metrics(metrics, step, rep.head, rep.total, lr, "L_final");
    }
  }
  return rep;
}

inline LossReport finetune_final(const HdvModel& model, ParamStore& ps, const TrainScene& scene,
                                 const StateThresholds& st, const TrainConfig& tc,
                                 const std::string& checkpoint_stage, bool fco = false,
                                 std::ostream* metrics = nullptr) {
  return finetune_final(model, ps, std::vector<TrainScene>{scene}, st, tc, checkpoint_stage, fco,
                        metrics);
}

}  // namespace hdv
