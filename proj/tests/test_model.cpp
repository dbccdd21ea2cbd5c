#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hdv/density.hpp"
#include "hdv/kdtree.hpp"
#include "hdv/layers.hpp"
#include "hdv/model.hpp"
#include "hdv/subsample.hpp"
#include "helpers.hpp"

using namespace hdv;

namespace {

// Dense mirror of a density-connected linear map: weight regions from
// invisible input blocks stay zero, everything else copies the block FCs.
Mat dc_dense_w(ParamStore& ps, const std::string& name, const Layout& in, const Layout& out) {
  const auto ioff = detail::block_offsets(in);
  const auto ooff = detail::block_offsets(out);
  Mat W(ioff.back(), ooff.back());
  for (size_t d = 0; d < out.size(); ++d) {
    const Mat& bw = ps.get(name + ".blk" + std::to_string(d) + ".W").value;
    int r = 0;
    for (size_t j = 0; j < in.size(); ++j) {
      if (in[j].state < out[d].state) continue;
      for (int w = 0; w < in[j].width; ++w, ++r)
        for (int c = 0; c < out[d].width; ++c) W(ioff[j] + w, ooff[d] + c) = bw(r, c);
    }
  }
  return W;
}

Mat dc_dense_b(ParamStore& ps, const std::string& name, const Layout& out) {
  const auto ooff = detail::block_offsets(out);
  Mat B(1, ooff.back());
  for (size_t d = 0; d < out.size(); ++d) {
    const Mat& bb = ps.get(name + ".blk" + std::to_string(d) + ".b").value;
    for (int c = 0; c < out[d].width; ++c) B(0, ooff[d] + c) = bb(0, c);
  }
  return B;
}

Mat dc_oracle(ParamStore& ps, const std::string& name, const Layout& in, const Layout& out,
              const Mat& x) {
  return tst::add_row(tst::mm(x, dc_dense_w(ps, name, in, out)), dc_dense_b(ps, name, out));
}

Mat dmlp_oracle(ParamStore& ps, const std::string& name, const Layout& in, const Layout& out,
                const Mat& x) {
  const Mat y = dc_oracle(ps, name, in, out, x);
  Mat res(y.rows, y.cols);
  int off = 0;
  for (size_t d = 0; d < out.size(); ++d) {
    const std::string bn = name + ".blk" + std::to_string(d);
    Mat blk = tst::slice(y, off, out[d].width);
    blk = tst::ln_rows(blk, ps.get(bn + ".ln_g").value, ps.get(bn + ".ln_b").value, kLnEps);
    blk = tst::leaky(blk, kReluSlope);
    for (int i = 0; i < res.rows; ++i)
      for (int j = 0; j < out[d].width; ++j) res(i, off + j) = blk(i, j);
    off += out[d].width;
  }
  return res;
}

Mat att_oracle(ParamStore& ps, const std::string& name, const Layout& layout, const Mat& x) {
  Mat s = dc_oracle(ps, name, layout, layout, x);
  int off = 0;
  for (const auto& b : layout) {
    s = tst::softmax_span(s, off, b.width);
    off += b.width;
  }
  Mat y = x;
  for (size_t i = 0; i < y.count(); ++i) y.a[i] *= s.a[i];
  return y;
}

Mat mean_rows(const Mat& x, int group) {
  Mat y(x.rows / group, x.cols);
  for (int i = 0; i < y.rows; ++i) {
    for (int g = 0; g < group; ++g)
      for (int j = 0; j < x.cols; ++j) y(i, j) += x(i * group + g, j);
    for (int j = 0; j < x.cols; ++j) y(i, j) /= group;
  }
  return y;
}

// Line-by-line script of the aggregation unit. With elfa=false this is the
// plain variant; the pos-encoding score gate always reads only itself.
Mat agg_oracle(ParamStore& ps, const std::string& name, const Layout& feats, int pos_width,
               bool elfa, const Mat& x, const LevelInput& lvl, int level) {
  const int n = lvl.nbr.n, K = lvl.nbr.k;
  Layout stacked = feats;
  stacked.push_back({pos_width, kStateAlways});
  Layout combined = feats;
  for (const auto& b : stacked) combined.push_back(b);

  Mat rel(n * K, 3);
  std::vector<int> flat(static_cast<size_t>(n) * K);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) {
      const int j = lvl.nbr.at(i, k);
      flat[static_cast<size_t>(i) * K + k] = j;
      const Vec3 d = lvl.pos[j] - lvl.pos[i];
      rel(i * K + k, 0) = d.x;
      rel(i * K + k, 1) = d.y;
      rel(i * K + k, 2) = d.z;
    }
  Mat gathered(n * K, x.cols);
  for (size_t r = 0; r < flat.size(); ++r)
    for (int j = 0; j < x.cols; ++j) gathered(static_cast<int>(r), j) = x(flat[r], j);
  const Mat stk = tst::concat(gathered, tst::mlp_ref(ps, name + ".pos", rel));

  const Mat pooled = mean_rows(att_oracle(ps, name + ".att1", stacked, stk), K);
  if (!elfa) return dmlp_oracle(ps, name + ".mix", stacked, feats, pooled);

  Mat exists(n, stk.cols);
  for (int i = 0; i < n; ++i) {
    double c = 0;
    for (int k = 0; k < K; ++k)
      if (lvl.state[flat[static_cast<size_t>(i) * K + k]] <= level) c += 1.0;
    const double inv = c > 0 ? 1.0 / c : 0.0;
    for (int k = 0; k < K; ++k) {
      if (lvl.state[flat[static_cast<size_t>(i) * K + k]] > level) continue;
      for (int j = 0; j < stk.cols; ++j) exists(i, j) += stk(i * K + k, j);
    }
    for (int j = 0; j < stk.cols; ++j) exists(i, j) *= inv;
  }
  const Mat orig = dmlp_oracle(ps, name + ".orig", stacked, feats, pooled);
  const Mat both = tst::concat(orig, exists);
  const Mat gated2 = att_oracle(ps, name + ".att2", combined, both);
  return dmlp_oracle(ps, name + ".mix", combined, feats, gated2);
}

LevelInput make_level(int n, int k, Rng& rng, int max_state) {
  LevelInput lvl;
  for (int i = 0; i < n; ++i)
    lvl.pos.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
  SpatialIndex index(lvl.pos);
  lvl.nbr = knn(index, k);
  for (int i = 0; i < n; ++i) {
    lvl.state.push_back(static_cast<int>(rng.next_below(max_state + 1)));
    lvl.rho_std.push_back(rng.uniform(-1, 1));
  }
  return lvl;
}

Mat eval_layer(const std::function<Var(Tape&)>& f) {
  Tape t;
  return t.g.val(f(t));
}

struct Scene {
  PointCloud cloud;
  DensityProfile prof;
  StateThresholds st;
  std::vector<int> state;
  Pyramid py;
  NetInput in;
};

Scene make_scene(const HdvConfig& cfg, uint64_t seed) {
  Scene s;
  Rng rng(seed);
  s.cloud = tst::random_cloud(40, rng, false, cfg.classes);
  s.prof = estimate_density(knn(SpatialIndex(s.cloud.pos), 8));
  s.st = calibrate_states({s.prof}, {0.95, 0.75, 0.5, 0.25, 0.05});
  s.state = inherent_state(s.prof, s.st);
  const auto groups = assign_groups(s.prof, group_thresholds());
  s.py = build_pyramid(s.cloud, groups, cfg.counts, cfg.k_neighbors, seed + 1);
  s.in = make_net_input(s.cloud, s.prof.rho, s.state, s.py, s.st, cfg);
  return s;
}

HdvConfig tiny_config() {
  HdvConfig cfg;
  cfg.counts = {24, 12, 6};
  cfg.e_widths = {4, 4, 4};
  cfg.k_neighbors = 4;
  cfg.classes = 3;
  cfg.pos_width = 3;
  cfg.final_att_hidden = 4;
  cfg.final_hidden = 8;
  return cfg;
}

}  // namespace

TEST_CASE("single-block density layers collapse to their plain forms") {
  Rng rng(70);
  ParamStore ps;
  DcLayer dc = DcLayer::make(ps, "d", single_block(5), single_block(4), rng);
  FcLayer fc = FcLayer::make(ps, "f", 5, 4, rng);
  ps.get("f.W").value = ps.get("d.blk0.W").value;
  ps.get("f.b").value = ps.get("d.blk0.b").value;

  const Mat x = tst::random_mat(7, 5, rng);
  const Mat yd = eval_layer([&](Tape& t) { return dc.apply(t, t.input(x)); });
  const Mat yf = eval_layer([&](Tape& t) { return fc.apply(t, t.input(x)); });
  REQUIRE(tst::max_abs_diff(yd, yf) < 1e-12);

  DmlpLayer dm = DmlpLayer::make(ps, "dm", single_block(5), single_block(4), rng);
  MlpLayer m = MlpLayer::make(ps, "m", 5, 4, rng);
  ps.get("m.W").value = ps.get("dm.blk0.W").value;
  ps.get("m.b").value = ps.get("dm.blk0.b").value;
  const Mat ydm = eval_layer([&](Tape& t) { return dm.apply(t, t.input(x)); });
  const Mat ym = eval_layer([&](Tape& t) { return m.apply(t, t.input(x)); });
  REQUIRE(tst::max_abs_diff(ydm, ym) < 1e-12);
  REQUIRE(tst::max_abs_diff(ydm, tst::mlp_ref(ps, "m", x)) < 1e-12);
}

TEST_CASE("density-connected maps equal their masked dense mirror") {
  Rng rng(71);
  for (int trial = 0; trial < 5; ++trial) {
    Layout in, out;
    const int nin = 2 + static_cast<int>(rng.next_below(3));
    const int nout = 2 + static_cast<int>(rng.next_below(3));
    for (int j = 0; j < nin; ++j)
      in.push_back({1 + static_cast<int>(rng.next_below(4)),
                    1 + static_cast<int>(rng.next_below(4))});
    in.push_back({2, kStateAlways});  // a pos-style always-visible block
    for (int d = 0; d < nout; ++d)
      out.push_back({1 + static_cast<int>(rng.next_below(4)),
                     1 + static_cast<int>(rng.next_below(4))});

    ParamStore ps;
    const std::string name = "dc" + std::to_string(trial);
    DcLayer dc = DcLayer::make(ps, name, in, out, rng);
    const Mat x = tst::random_mat(6, layout_width(in), rng);
    const Mat y = eval_layer([&](Tape& t) { return dc.apply(t, t.input(x)); });
    REQUIRE(tst::max_abs_diff(y, dc_oracle(ps, name, in, out, x)) < 1e-12);

    DmlpLayer dm = DmlpLayer::make(ps, name + "m", in, out, rng);
    const Mat y2 = eval_layer([&](Tape& t) { return dm.apply(t, t.input(x)); });
    REQUIRE(tst::max_abs_diff(y2, dmlp_oracle(ps, name + "m", in, out, x)) < 1e-12);
  }
}

TEST_CASE("sparser outputs never react to denser-only inputs") {
  Rng rng(72);
  const Layout in = {{3, 1}, {2, 2}, {3, 3}, {2, kStateAlways}};
  const Layout out = {{2, 1}, {3, 2}, {2, 3}};
  ParamStore ps;
  DmlpLayer dm = DmlpLayer::make(ps, "vis", in, out, rng);
  const auto ioff = detail::block_offsets(in);
  const auto ooff = detail::block_offsets(out);

  const Mat x = tst::random_mat(5, layout_width(in), rng);
  const Mat y = eval_layer([&](Tape& t) { return dm.apply(t, t.input(x)); });

  for (size_t j = 0; j < in.size(); ++j) {
    Mat xp = x;
    for (int i = 0; i < xp.rows; ++i)
      for (int w = 0; w < in[j].width; ++w) xp(i, ioff[j] + w) += rng.uniform(0.5, 1.5);
    const Mat yp = eval_layer([&](Tape& t) { return dm.apply(t, t.input(xp)); });
    for (size_t d = 0; d < out.size(); ++d) {
      if (in[j].state >= out[d].state) continue;  // visible, may change
      for (int i = 0; i < y.rows; ++i)
        for (int w = 0; w < out[d].width; ++w)
          REQUIRE(yp(i, ooff[d] + w) == y(i, ooff[d] + w));
    }
  }
}

TEST_CASE("attention gates are per-span softmax weights") {
  Rng rng(73);
  ParamStore ps;
  const Layout layout = {{3, 1}, {2, 2}};
  AttentionLayer att = AttentionLayer::make(ps, "att", layout, rng);

  // Ones input: the output is the gate itself, so spans sum to one.
  Mat ones(6, 5);
  for (double& v : ones.a) v = 1.0;
  const Mat gate = eval_layer([&](Tape& t) { return att.apply(t, t.input(ones)); });
  for (int i = 0; i < gate.rows; ++i) {
    double s0 = gate(i, 0) + gate(i, 1) + gate(i, 2);
    double s1 = gate(i, 3) + gate(i, 4);
    REQUIRE(s0 == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(s1 == Catch::Approx(1.0).epsilon(1e-12));
  }

  // Zero scores give the uniform gate x / span_width.
  ParamStore psz;
  AttentionLayer attz = AttentionLayer::make(psz, "attz", single_block(4), rng);
  psz.get("attz.blk0.W").value = Mat(4, 4);
  psz.get("attz.blk0.b").value = Mat(1, 4);
  const Mat x = tst::random_mat(5, 4, rng);
  const Mat y = eval_layer([&](Tape& t) { return attz.apply(t, t.input(x)); });
  for (size_t i = 0; i < y.count(); ++i)
    REQUIRE(y.a[i] == Catch::Approx(x.a[i] * 0.25).margin(1e-15));

  // A dominated score column concentrates the gate onto one feature.
  psz.get("attz.blk0.b").value(0, 2) = 50.0;
  const Mat y2 = eval_layer([&](Tape& t) { return attz.apply(t, t.input(x)); });
  for (int i = 0; i < y2.rows; ++i) {
    REQUIRE(y2(i, 2) == Catch::Approx(x(i, 2)).epsilon(1e-12));
    REQUIRE(std::abs(y2(i, 0)) < 1e-12);
  }

  const Mat yo = att_oracle(psz, "attz", single_block(4), x);
  REQUIRE(tst::max_abs_diff(y2, yo) < 1e-12);
}

TEST_CASE("single-subsection aggregation equals the open reference") {
  Rng rng(74);
  LevelInput lvl = make_level(12, 4, rng, 3);
  ParamStore ps;
  const Layout feats = single_block(5);
  AggLayer agg = AggLayer::make(ps, "lfa", feats, 3, false, rng);
  const Mat x = tst::random_mat(12, 5, rng);
  const Mat y = eval_layer([&](Tape& t) { return agg.apply(t, t.input(x), lvl, 1); });
  const Mat yo = agg_oracle(ps, "lfa", feats, 3, false, x, lvl, 1);
  REQUIRE(tst::max_abs_diff(y, yo) < 1e-9);
}

TEST_CASE("existential aggregation follows the two-branch script") {
  Rng rng(75);
  const Layout feats = {{3, 1}, {2, 2}};
  for (int level = 1; level <= 2; ++level) {
    LevelInput lvl = make_level(10, 3, rng, 4);  // random states 0..4
    ParamStore ps;
    AggLayer agg = AggLayer::make(ps, "elfa", feats, 3, true, rng);
    const Mat x = tst::random_mat(10, 5, rng);
    const Mat y = eval_layer([&](Tape& t) { return agg.apply(t, t.input(x), lvl, level); });
    const Mat yo = agg_oracle(ps, "elfa", feats, 3, true, x, lvl, level);
    REQUIRE(tst::max_abs_diff(y, yo) < 1e-12);
  }
}

TEST_CASE("existential branch handles the all and none cases") {
  Rng rng(76);
  const Layout feats = single_block(4);
  LevelInput lvl = make_level(8, 3, rng, 0);
  ParamStore ps;
  AggLayer agg = AggLayer::make(ps, "ex", feats, 3, true, rng);
  const Mat x = tst::random_mat(8, 4, rng);

  // Every neighbour state 0 <= level: masked mean equals the plain mean.
  for (auto& s : lvl.state) s = 0;
  const Mat y_all = eval_layer([&](Tape& t) { return agg.apply(t, t.input(x), lvl, 2); });
  REQUIRE(tst::max_abs_diff(y_all, agg_oracle(ps, "ex", feats, 3, true, x, lvl, 2)) < 1e-12);

  // No neighbour exists at this level: the branch zeroes out, output finite.
  for (auto& s : lvl.state) s = 5;
  const Mat y_none = eval_layer([&](Tape& t) { return agg.apply(t, t.input(x), lvl, 2); });
  for (double v : y_none.a) REQUIRE(std::isfinite(v));
  REQUIRE(tst::max_abs_diff(y_none, agg_oracle(ps, "ex", feats, 3, true, x, lvl, 2)) < 1e-12);
}

TEST_CASE("aggregation ignores neighbour order") {
  Rng rng(77);
  LevelInput lvl = make_level(10, 4, rng, 2);
  ParamStore ps;
  AggLayer agg = AggLayer::make(ps, "perm", {{2, 1}, {2, 2}}, 3, true, rng);
  const Mat x = tst::random_mat(10, 4, rng);
  const Mat y = eval_layer([&](Tape& t) { return agg.apply(t, t.input(x), lvl, 1); });

  LevelInput shuffled = lvl;
  for (int i = 0; i < 10; ++i) {  // reverse each point's neighbour list
    for (int k = 0; k < 4; ++k) {
      shuffled.nbr.idx[i * 4 + k] = lvl.nbr.idx[i * 4 + (3 - k)];
      shuffled.nbr.dist[i * 4 + k] = lvl.nbr.dist[i * 4 + (3 - k)];
    }
  }
  const Mat y2 = eval_layer([&](Tape& t) { return agg.apply(t, t.input(x), shuffled, 1); });
  REQUIRE(tst::max_abs_diff(y, y2) < 1e-9);
}

TEST_CASE("encoder block keeps sparse outputs blind to dense carries") {
  Rng rng(78);
  ParamStore ps;
  const std::vector<int> e = {4, 4}, h = {2, 2}, states = {1, 2};
  DbBlock db = DbBlock::make(ps, "db", e, h, states, 2, 7, 3, true, rng);
  LevelInput lvl = make_level(9, 3, rng, 3);
  lvl.raw = tst::random_mat(9, 7, rng);

  const Mat prev = tst::random_mat(9, 4, rng);
  auto run = [&](const Mat& p) {
    return eval_layer([&](Tape& t) { return db.apply(t, t.input(p), lvl); });
  };
  const Mat y = run(prev);
  REQUIRE(y.rows == 9);
  REQUIRE(y.cols == 8);

  Mat prev2 = prev;
  for (double& v : prev2.a) v += 0.7;
  const Mat y2 = run(prev2);
  // Carried features hold the state-1 subsection; the level's own state-2
  // subsection (columns 4..7) must not move.
  for (int i = 0; i < 9; ++i)
    for (int j = 4; j < 8; ++j) REQUIRE(y2(i, j) == y(i, j));
  double moved = 0;
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 4; ++j) moved = std::max(moved, std::abs(y2(i, j) - y(i, j)));
  REQUIRE(moved > 0.0);
}

TEST_CASE("encoder block gradients agree with finite differences") {
  Rng rng(79);
  ParamStore ps;
  DbBlock db = DbBlock::make(ps, "fd", {3, 3}, {2, 2}, {1, 2}, 2, 7, 3, true, rng);
  LevelInput lvl = make_level(8, 3, rng, 3);
  lvl.raw = tst::random_mat(8, 7, rng);
  const Mat prev = tst::random_mat(8, 3, rng);
  const double worst = tst::fd_check(
      ps,
      [&](Tape& t) {
        Var y = db.apply(t, t.input(prev), lvl);
        Rng r(5);
        Mat w(t.g.cols(y), 1);
        for (double& v : w.a) v = r.uniform(-1, 1);
        Var s = t.g.matmul(y, t.input(w));
        return t.g.mean_pool_rows(s, t.g.rows(s));
      },
      1e-5, 0, 2);
  REQUIRE(worst < 1e-4);
}

TEST_CASE("allocation modes shape the subsection states") {
  HdvConfig cfg = tiny_config();
  cfg.e_widths = {4, 4, 4};
  cfg.feature_allocation = "full";
  REQUIRE(cfg.state_for_level(1) == 1);
  REQUIRE(cfg.state_for_level(3) == 3);
  cfg.feature_allocation = "none";
  REQUIRE(cfg.state_for_level(3) == 1);
  cfg.feature_allocation = "limited";
  cfg.allocation_limit = 2;
  REQUIRE(cfg.state_for_level(1) == 1);
  REQUIRE(cfg.state_for_level(2) == 2);
  REQUIRE(cfg.state_for_level(3) == 2);

  cfg.feature_allocation = "full";
  const Layout fl = cfg.feature_layout(3);
  REQUIRE(fl.size() == 3);
  REQUIRE(fl[2].state == 3);
  REQUIRE(layout_width(fl) == 12);
}

TEST_CASE("config validation rejects malformed setups") {
  HdvConfig cfg = tiny_config();
  cfg.validate();
  HdvConfig bad = cfg;
  bad.e_widths = {4};
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.counts = {24, 24, 6};
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.classes = 1;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.feature_allocation = "some";
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.feature_allocation = "limited";
  bad.allocation_limit = 9;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.h_widths = {8, 2, 2};
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("full allocation spends strictly fewer parameters than none") {
  HdvConfig full = tiny_config();
  HdvConfig none = tiny_config();
  none.feature_allocation = "none";
  ParamStore ps_full, ps_none;
  HdvModel m_full(full, ps_full, 1);
  HdvModel m_none(none, ps_none, 1);
  REQUIRE(ps_full.scalar_count() < ps_none.scalar_count());
}

TEST_CASE("network forward produces logits at every resolution") {
  const HdvConfig cfg = tiny_config();
  const Scene sc = make_scene(cfg, 400);
  ParamStore ps;
  HdvModel model(cfg, ps, 7);

  Tape t;
  const auto f = model.forward(t, sc.in, true, true);
  REQUIRE(f.enc.size() == 3);
  REQUIRE(f.dec.size() == 2);
  REQUIRE(f.heads.size() == 2);
  REQUIRE(t.g.rows(f.heads[0]) == 24);
  REQUIRE(t.g.rows(f.heads[1]) == 12);
  REQUIRE(t.g.cols(f.heads[0]) == 3);
  REQUIRE(t.g.rows(f.final_logits) == 24);
  REQUIRE(t.g.cols(f.final_logits) == 3);
  for (double v : t.g.val(f.final_logits).a) REQUIRE(std::isfinite(v));

  // Same seed, same scene: the whole forward reproduces bit-identically.
  ParamStore ps2;
  HdvModel model2(cfg, ps2, 7);
  Tape t2;
  const auto f2 = model2.forward(t2, sc.in, true, true);
  REQUIRE(tst::max_abs_diff(t.g.val(f.final_logits), t2.g.val(f2.final_logits)) == 0.0);
}

TEST_CASE("upsampling chains compose across levels") {
  const HdvConfig cfg = tiny_config();
  const Scene sc = make_scene(cfg, 401);
  const auto to2 = HdvModel::compose_up(sc.in, 2);
  const auto to3 = HdvModel::compose_up(sc.in, 3);
  for (int i = 0; i < 24; ++i) {
    REQUIRE(to2[i] == sc.in.up[0][i]);
    REQUIRE(to3[i] == sc.in.up[1][sc.in.up[0][i]]);
  }
  const auto to1 = HdvModel::compose_up(sc.in, 1);
  for (int i = 0; i < 24; ++i) REQUIRE(to1[i] == i);
}

TEST_CASE("network inputs are centered and carry density and labels") {
  HdvConfig cfg = tiny_config();
  const Scene sc = make_scene(cfg, 402);

  Vec3 sum{0, 0, 0};
  for (const auto& p : sc.in.level[0].pos) sum = sum + p;
  REQUIRE(std::abs(sum.x) < 1e-9 * 24);
  REQUIRE(std::abs(sum.y) < 1e-9 * 24);
  REQUIRE(std::abs(sum.z) < 1e-9 * 24);

  for (int l = 0; l < 3; ++l) {
    const auto& lv = sc.in.level[l];
    REQUIRE(lv.raw.cols == 7);
    for (int i = 0; i < lv.n(); ++i) {
      const int a = sc.py.idx[l][i];
      REQUIRE(lv.raw(i, 6) == lv.rho_std[i]);
      REQUIRE(lv.state[i] == sc.state[a]);
      REQUIRE(lv.label[i] == static_cast<int>(sc.cloud.label[a]));
      REQUIRE(lv.rho_std[i] ==
              (std::log10(sc.prof.rho[a]) - sc.st.rho_log10_mean) / sc.st.rho_log10_std);
    }
  }

  cfg.pass_density_input = false;
  const auto in6 = make_net_input(sc.cloud, sc.prof.rho, sc.state, sc.py, sc.st, cfg);
  REQUIRE(in6.level[0].raw.cols == 6);

  std::vector<double> short_rho(sc.cloud.size() - 1, 1.0);
  REQUIRE_THROWS_AS(make_net_input(sc.cloud, short_rho, sc.state, sc.py, sc.st, cfg),
                    ContractError);
}
