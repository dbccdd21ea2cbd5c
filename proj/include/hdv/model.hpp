#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hdv/cloud.hpp"
#include "hdv/density.hpp"
#include "hdv/error.hpp"
#include "hdv/layers.hpp"
#include "hdv/subsample.hpp"

// The segmentation network: a nested encoder-decoder over a point pyramid.
// Each encoder level appends one feature subsection for its density state;
// visibility between subsections is controlled by block states, so features
// of sparse states never depend on dense-only inputs.

namespace hdv {

struct HdvConfig {
  std::vector<int> counts{256, 64, 16, 8, 4};    // pyramid sizes N_1..N_5
  std::vector<int> e_widths{16, 16, 32, 64, 128};  // subsection widths E_d
  std::vector<int> h_widths;                      // hidden widths, default ceil(E/2)
  int k_neighbors = 16;
  int classes = 3;
  int pos_width = 16;
  int final_att_hidden = 8;
  int final_hidden = 32;
  bool use_elfa = true;
  bool pass_density_input = true;
  std::string feature_allocation = "full";  // full | none | limited
  int allocation_limit = 4;

  int levels() const { return static_cast<int>(e_widths.size()); }
  int raw_dim() const { return pass_density_input ? 7 : 6; }

  std::vector<int> hidden() const {
    if (!h_widths.empty()) return h_widths;
    std::vector<int> h(e_widths.size());
    for (size_t i = 0; i < h.size(); ++i) h[i] = (e_widths[i] + 1) / 2;
    return h;
  }

  // Visibility state of the subsection created at 1-based level a.
  int state_for_level(int a) const {
    if (feature_allocation == "none") return 1;
    if (feature_allocation == "limited") return std::min(a, allocation_limit);
    return a;
  }

  Layout feature_layout(int a) const {  // E-layout of F^(a)
    Layout l;
    for (int j = 1; j <= a; ++j) l.push_back({e_widths[j - 1], state_for_level(j)});
    return l;
  }

  Layout hidden_layout(int a) const {
    Layout l;
    const auto h = hidden();
    for (int j = 1; j <= a; ++j) l.push_back({h[j - 1], state_for_level(j)});
    return l;
  }

  void validate() const {
    const size_t L = e_widths.size();
    if (L < 2 || L > 5) throw ValidationError("levels must be between 2 and 5");
    if (counts.size() != L) throw ValidationError("counts/e_widths length mismatch");
    if (!h_widths.empty() && h_widths.size() != L)
      throw ValidationError("h_widths length mismatch");
    for (size_t i = 0; i < L; ++i) {
      if (counts[i] < 2) throw ValidationError("pyramid counts must be >= 2");
      if (i && counts[i] >= counts[i - 1])
        throw ValidationError("pyramid counts must be strictly decreasing");
      if (e_widths[i] < 1) throw ValidationError("subsection widths must be positive");
      if (!h_widths.empty() && (h_widths[i] < 1 || h_widths[i] > e_widths[i]))
        throw ValidationError("hidden widths must be in [1, E_d]");
    }
    if (k_neighbors < 1) throw ValidationError("k_neighbors must be >= 1");
    if (classes < 2) throw ValidationError("need at least two classes");
    if (pos_width < 1 || final_att_hidden < 1 || final_hidden < 1)
      throw ValidationError("layer widths must be positive");
    if (feature_allocation != "full" && feature_allocation != "none" &&
        feature_allocation != "limited")
      throw ValidationError("feature_allocation must be full, none, or limited");
    if (feature_allocation == "limited" &&
        (allocation_limit < 1 || allocation_limit > static_cast<int>(L)))
      throw ValidationError("allocation_limit outside level range");
  }
};

struct LevelInput {
  Mat raw;                     // n x raw_dim (centered xyz, rgb, opt std log rho)
  std::vector<Vec3> pos;       // centered coordinates
  NeighborTable nbr;
  std::vector<int> state;      // inherent states 0..5
  std::vector<int> label;      // empty when unlabeled
  std::vector<double> rho_std;

  int n() const { return static_cast<int>(pos.size()); }
};

struct NetInput {
  std::vector<LevelInput> level;
  std::vector<std::vector<int>> rel;  // rel[l] (l>=1): level-l row -> level-(l-1) row
  std::vector<std::vector<int>> up;   // up[l] (l<L-1): level-l row -> level-(l+1) row
};

// Local feature aggregation. Both variants stack each point's K neighbour
// features with a plain-MLP encoding of the relative positions, gate them
// with a block-local attention softmax, and mean-pool over the K rows. The
// existential variant adds a second branch that averages only neighbours
// whose inherent state is at least as dense as the current level, then fuses
// both branches behind a second attention gate.
struct AggLayer {
  bool elfa = false;
  Layout feats, stacked, combined;
  MlpLayer pos_enc;
  AttentionLayer att1;
  DmlpLayer mix;       // plain variant: stacked -> feats
  DmlpLayer orig_mix;  // elfa: stacked -> feats
  AttentionLayer att2;
  DmlpLayer final_mix;  // elfa: combined -> feats

  static AggLayer make(ParamStore& ps, const std::string& name, const Layout& feats,
                       int pos_width, bool elfa, Rng& rng) {
    AggLayer a;
    a.elfa = elfa;
    a.feats = feats;
    a.stacked = feats;
    a.stacked.push_back({pos_width, kStateAlways});
    a.pos_enc = MlpLayer::make(ps, name + ".pos", 3, pos_width, rng);
    a.att1 = AttentionLayer::make(ps, name + ".att1", a.stacked, rng);
    if (elfa) {
      a.orig_mix = DmlpLayer::make(ps, name + ".orig", a.stacked, feats, rng);
      a.combined = feats;
      for (const auto& b : a.stacked) a.combined.push_back(b);
      a.att2 = AttentionLayer::make(ps, name + ".att2", a.combined, rng);
      a.final_mix = DmlpLayer::make(ps, name + ".mix", a.combined, feats, rng);
    } else {
      a.mix = DmlpLayer::make(ps, name + ".mix", a.stacked, feats, rng);
    }
    return a;
  }

  Var apply(Tape& t, Var x, const LevelInput& lvl, int current_level) const {
    const int n = lvl.nbr.n, K = lvl.nbr.k;
    if (t.g.rows(x) != n) throw ShapeError("aggregation row mismatch");
    std::vector<int> flat(static_cast<size_t>(n) * K);
    Mat rel(n * K, 3);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < K; ++k) {
        const int j = lvl.nbr.at(i, k);
        flat[static_cast<size_t>(i) * K + k] = j;
        const Vec3 d = lvl.pos[j] - lvl.pos[i];
        rel(i * K + k, 0) = d.x;
        rel(i * K + k, 1) = d.y;
        rel(i * K + k, 2) = d.z;
      }
    Var penc = pos_enc.apply(t, t.input(std::move(rel)));
    Var gathered = t.g.gather_rows(x, flat);
    Var stk = t.g.concat_cols({gathered, penc});

    Var gated = att1.apply(t, stk);
    Var pooled = t.g.mean_pool_rows(gated, K);
    if (!elfa) return mix.apply(t, pooled);

    std::vector<double> mask(flat.size());
    for (size_t r = 0; r < flat.size(); ++r)
      mask[r] = lvl.state[flat[r]] <= current_level ? 1.0 : 0.0;
    Var exists = t.g.masked_mean_pool_rows(stk, K, std::move(mask));
    Var orig = orig_mix.apply(t, pooled);
    Var both = t.g.concat_cols({orig, exists});
    Var gated2 = att2.apply(t, both);
    return final_mix.apply(t, gated2);
  }
};

// One encoder level: embed the level's raw points into the new subsection,
// compress carried features to hidden widths, aggregate twice with a skip
// around the pair, and expand back to subsection widths.
struct DbBlock {
  int level = 1;
  Layout in_feats, hidden, out_feats;
  MlpLayer raw_embed;
  DmlpLayer reduce;  // level > 1 only
  AggLayer agg1, agg2;
  DmlpLayer expand;

  static DbBlock make(ParamStore& ps, const std::string& name, const std::vector<int>& e,
                      const std::vector<int>& h, const std::vector<int>& states, int level,
                      int raw_dim, int pos_width, bool elfa, Rng& rng) {
    if (level < 1 || static_cast<int>(e.size()) < level || h.size() != e.size() ||
        states.size() != e.size())
      throw ContractError("db block width/state arrays must cover the level");
    DbBlock b;
    b.level = level;
    for (int j = 0; j < level - 1; ++j) b.in_feats.push_back({e[j], states[j]});
    Layout hid_prev;
    for (int j = 0; j < level - 1; ++j) hid_prev.push_back({h[j], states[j]});
    for (int j = 0; j < level; ++j) {
      b.hidden.push_back({h[j], states[j]});
      b.out_feats.push_back({e[j], states[j]});
    }
    b.raw_embed = MlpLayer::make(ps, name + ".raw", raw_dim, h[level - 1], rng);
    if (level > 1) b.reduce = DmlpLayer::make(ps, name + ".reduce", b.in_feats, hid_prev, rng);
    b.agg1 = AggLayer::make(ps, name + ".agg1", b.hidden, pos_width, elfa, rng);
    b.agg2 = AggLayer::make(ps, name + ".agg2", b.hidden, pos_width, elfa, rng);
    b.expand = DmlpLayer::make(ps, name + ".expand", b.hidden, b.out_feats, rng);
    return b;
  }

  Var apply(Tape& t, Var prev_feats, const LevelInput& lvl) const {
    Var new_h = raw_embed.apply(t, t.input(lvl.raw));
    Var h0 = new_h;
    if (level > 1) {
      if (!prev_feats.valid()) throw ContractError("db block above level 1 needs features");
      h0 = t.g.concat_cols({reduce.apply(t, prev_feats), new_h});
    }
    Var h1 = agg1.apply(t, h0, lvl, level);
    Var h2 = agg2.apply(t, h1, lvl, level);
    return expand.apply(t, t.g.add(h0, h2));
  }
};

class HdvModel {
 public:
  HdvModel(HdvConfig cfg, ParamStore& ps, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(init_seed);
    const int L = cfg_.levels();
    const auto h = cfg_.hidden();
    std::vector<int> states(L);
    for (int a = 1; a <= L; ++a) states[a - 1] = cfg_.state_for_level(a);

    for (int a = 1; a <= L; ++a)
      db_.push_back(DbBlock::make(ps, "enc.db" + std::to_string(a), cfg_.e_widths, h, states,
                                  a, cfg_.raw_dim(), cfg_.pos_width, cfg_.use_elfa, rng));

    for (int l = 1; l <= L - 1; ++l) {
      // Interleaved skip/up subsections d = 1..l, then the coarser-only tail.
      Layout in;
      for (int d = 1; d <= l; ++d) {
        in.push_back({cfg_.e_widths[d - 1], states[d - 1]});
        in.push_back({cfg_.e_widths[d - 1], states[d - 1]});
      }
      in.push_back({cfg_.e_widths[l], states[l]});
      merge_.push_back(
          DmlpLayer::make(ps, "dec.us" + std::to_string(l + 1), in, cfg_.feature_layout(l), rng));
    }

    for (int a = 1; a <= L - 1; ++a) {
      const Layout fl = cfg_.feature_layout(a);
      head_dmlp_.push_back(DmlpLayer::make(ps, "head.g" + std::to_string(a) + ".dmlp", fl, fl, rng));
      head_dc_.push_back(DcLayer::make(ps, "head.g" + std::to_string(a) + ".dc", fl,
                                       single_block(cfg_.classes), rng));
    }

    const int att_in = std::max(0, L - 2) + 1;  // B_1..B_{L-2} plus rho
    final_att_mlp_ = MlpLayer::make(ps, "final.att1", att_in, cfg_.final_att_hidden, rng);
    final_att_out_ = FcLayer::make(ps, "final.att2", cfg_.final_att_hidden, L - 1, rng);
    int cat_w = 0;
    for (int a = 1; a <= L - 1; ++a) cat_w += layout_width(cfg_.feature_layout(a));
    final_mlp_ = MlpLayer::make(ps, "final.mlp", cat_w, cfg_.final_hidden, rng);
    final_out_ = FcLayer::make(ps, "final.out", cfg_.final_hidden, cfg_.classes, rng);
  }

  const HdvConfig& config() const { return cfg_; }
  const DbBlock& db_block(int level) const { return db_[level - 1]; }

  struct Forward {
    std::vector<Var> enc;    // encoder outputs F^(a), level order
    std::vector<Var> dec;    // decoder outputs, levels 1..L-1
    std::vector<Var> heads;  // per-level class logits
    Var final_logits;
  };

  Forward forward(Tape& t, const NetInput& in, bool with_heads, bool with_final) const {
    const int L = cfg_.levels();
    if (static_cast<int>(in.level.size()) != L) throw ShapeError("level count mismatch");
    Forward f;

    for (int a = 1; a <= L; ++a) {
      Var prev;
      if (a > 1) prev = t.g.gather_rows(f.enc[a - 2], in.rel[a - 1]);
      f.enc.push_back(db_[a - 1].apply(t, prev, in.level[a - 1]));
    }

    std::vector<Var> dec(L);
    dec[L - 1] = f.enc[L - 1];
    for (int l = L - 1; l >= 1; --l) {
      Var up = t.g.gather_rows(dec[l], in.up[l - 1]);
      Var skip = f.enc[l - 1];
      const auto skip_off = detail::block_offsets(cfg_.feature_layout(l));
      const auto up_off = detail::block_offsets(cfg_.feature_layout(l + 1));
      std::vector<Var> parts;
      for (int d = 1; d <= l; ++d) {
        parts.push_back(t.g.slice_cols(skip, skip_off[d - 1], cfg_.e_widths[d - 1]));
        parts.push_back(t.g.slice_cols(up, up_off[d - 1], cfg_.e_widths[d - 1]));
      }
      parts.push_back(t.g.slice_cols(up, up_off[l], cfg_.e_widths[l]));
      dec[l - 1] = merge_[l - 1].apply(t, t.g.concat_cols(parts));
    }
    f.dec.assign(dec.begin(), dec.end() - 1);

    if (with_heads)
      for (int a = 1; a <= L - 1; ++a)
        f.heads.push_back(head_dc_[a - 1].apply(t, head_dmlp_[a - 1].apply(t, f.dec[a - 1])));

    if (with_final) f.final_logits = final_forward(t, in, f.dec);
    return f;
  }

  // Chain of nearest-coarse copies from level `from` (1-based) down to level 1.
  static std::vector<int> compose_up(const NetInput& in, int from) {
    const int n1 = in.level[0].n();
    std::vector<int> idx(n1);
    for (int i = 0; i < n1; ++i) {
      int j = i;
      for (int l = 0; l < from - 1; ++l) j = in.up[l][j];
      idx[i] = j;
    }
    return idx;
  }

 private:
  Var final_forward(Tape& t, const NetInput& in, const std::vector<Var>& dec) const {
    const int L = cfg_.levels();
    const int n1 = in.level[0].n();

    Mat att_in(n1, std::max(0, L - 2) + 1);
    for (int i = 0; i < n1; ++i) {
      int c = 0;
      for (int d = 1; d <= L - 2; ++d)
        att_in(i, c++) = in.level[0].state[i] <= d ? 1.0 : 0.0;
      att_in(i, c) = in.level[0].rho_std[i];
    }
    Var gates = t.g.softplus(final_att_out_.apply(t, final_att_mlp_.apply(t, t.input(std::move(att_in)))));

    std::vector<Var> parts;
    for (int a = 1; a <= L - 1; ++a) {
      Var fa = dec[a - 1];
      if (a > 1) fa = t.g.gather_rows(fa, compose_up(in, a));
      parts.push_back(t.g.row_scale(fa, t.g.slice_cols(gates, a - 1, 1)));
    }
    Var cat = parts.size() == 1 ? parts[0] : t.g.concat_cols(parts);
    return final_out_.apply(t, final_mlp_.apply(t, cat));
  }

  HdvConfig cfg_;
  std::vector<DbBlock> db_;
  std::vector<DmlpLayer> merge_;
  std::vector<DmlpLayer> head_dmlp_;
  std::vector<DcLayer> head_dc_;
  MlpLayer final_att_mlp_;
  FcLayer final_att_out_;
  MlpLayer final_mlp_;
  FcLayer final_out_;
};

// Assemble network inputs for one cloud and its pyramid. Coordinates are
// centered on the base level's centroid; density enters as standardized
// log10.
inline NetInput make_net_input(const PointCloud& cloud, const std::vector<double>& rho,
                               const std::vector<int>& states, const Pyramid& py,
                               const StateThresholds& st, const HdvConfig& cfg) {
  if (rho.size() != cloud.size() || states.size() != cloud.size())
    throw ContractError("profile/state size mismatch");
  NetInput in;
  Vec3 center{0, 0, 0};
  for (int a : py.idx[0]) center = center + cloud.pos[a];
  center = center * (1.0 / static_cast<double>(py.idx[0].size()));

  for (int l = 0; l < py.levels(); ++l) {
    LevelInput lv;
    const auto& ids = py.idx[l];
    const int n = static_cast<int>(ids.size());
    lv.raw = Mat(n, cfg.raw_dim());
    lv.pos.resize(n);
    lv.state.resize(n);
    lv.rho_std.resize(n);
    if (cloud.has_labels()) lv.label.resize(n);
    for (int i = 0; i < n; ++i) {
      const int a = ids[i];
      const Vec3 p = cloud.pos[a] - center;
      lv.pos[i] = p;
      lv.raw(i, 0) = p.x;
      lv.raw(i, 1) = p.y;
      lv.raw(i, 2) = p.z;
      for (int c = 0; c < 3; ++c) lv.raw(i, 3 + c) = cloud.color[a][c];
      lv.rho_std[i] = (std::log10(rho[a]) - st.rho_log10_mean) / st.rho_log10_std;
      if (cfg.pass_density_input) lv.raw(i, 6) = lv.rho_std[i];
      lv.state[i] = states[a];
      if (cloud.has_labels()) lv.label[i] = cloud.label[a];
    }
    lv.nbr = py.nbr[l];
    in.level.push_back(std::move(lv));
  }
  in.rel = py.rel;
  in.up = py.up_map;
  return in;
}

}  // namespace hdv
