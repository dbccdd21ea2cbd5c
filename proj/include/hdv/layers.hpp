#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hdv/error.hpp"
#include "hdv/params.hpp"
#include "hdv/tensor.hpp"

// Density-assigned layer primitives. A feature matrix is split column-wise
// into blocks, each tagged with a visibility state (smaller = denser). An
// output block may read exactly the input blocks whose state is >= its own,
// so sparse-state features never depend on dense-only ones. Position-encoding
// blocks carry kStateAlways and are visible to every output.

namespace hdv {

inline constexpr double kLnEps = 1e-6;
inline constexpr double kReluSlope = 0.2;
inline constexpr int kStateAlways = 1 << 20;

struct Block {
  int width = 0;
  int state = 1;
};
using Layout = std::vector<Block>;

inline int layout_width(const Layout& l) {
  int w = 0;
  for (const auto& b : l) w += b.width;
  return w;
}

inline Layout single_block(int width, int state = 1) { return {{width, state}}; }

// Graph construction context: one tape per forward pass, remembering which
// parameters were bound so their gradients can be pulled after backward().
struct Tape {
  Graph g;
  std::vector<std::pair<Var, ParamTensor*>> bound;

  Var param(ParamTensor& p) {
    for (const auto& [v, q] : bound)
      if (q == &p) return v;
    Var v = bind(g, p);
    bound.push_back({v, &p});
    return v;
  }

  Var input(Mat m) { return g.leaf(std::move(m), false); }

  void backward_accumulate(Var loss, double scale = 1.0) {
    g.backward(loss);
    for (auto& [v, p] : bound) pull_grad(g, v, *p, scale);
  }
};

struct FcLayer {
  ParamTensor* W = nullptr;
  ParamTensor* b = nullptr;

  static FcLayer make(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    if (in < 1 || out < 1) throw ShapeError("fc " + name + " needs positive widths");
    FcLayer l;
    l.W = &ps.create(name + ".W", in, out, in, rng);
    l.b = &ps.create(name + ".b", 1, out, in, rng);
    return l;
  }

  Var apply(Tape& t, Var x) const {
    return t.g.add_bias(t.g.matmul(x, t.param(*W)), t.param(*b));
  }
};

// MLP(x) = leaky_relu(LN(FC(x))): the activation-normalization unit applied
// after every learned projection outside of score/logit layers.
struct MlpLayer {
  FcLayer fc;
  ParamTensor* ln_g = nullptr;
  ParamTensor* ln_b = nullptr;

  static MlpLayer make(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    MlpLayer l;
    l.fc = FcLayer::make(ps, name, in, out, rng);
    l.ln_g = &ps.constant(name + ".ln_g", 1, out, 1.0, rng);
    l.ln_b = &ps.constant(name + ".ln_b", 1, out, 0.0, rng);
    return l;
  }

  Var apply(Tape& t, Var x) const {
    Var y = fc.apply(t, x);
    y = t.g.layer_norm(y, t.param(*ln_g), t.param(*ln_b), kLnEps);
    return t.g.leaky_relu(y, kReluSlope);
  }
};

namespace detail {

// Visible input blocks for an output of the given state.
inline std::vector<int> visible_blocks(const Layout& in, int out_state) {
  std::vector<int> v;
  for (size_t j = 0; j < in.size(); ++j)
    if (in[j].state >= out_state) v.push_back(static_cast<int>(j));
  return v;
}

inline std::vector<int> block_offsets(const Layout& l) {
  std::vector<int> off(l.size() + 1, 0);
  for (size_t j = 0; j < l.size(); ++j) off[j + 1] = off[j] + l[j].width;
  return off;
}

}  // namespace detail

// Density-connected linear map: per output block, an FC over its visible
// input blocks. With a single-block layout this is exactly a plain FC.
struct DcLayer {
  Layout in, out;
  std::vector<FcLayer> fc;               // one per out block
  std::vector<std::vector<int>> visible;  // in-block indices per out block

  static DcLayer make(ParamStore& ps, const std::string& name, Layout in, Layout out, Rng& rng) {
    DcLayer l;
    l.in = std::move(in);
    l.out = std::move(out);
    if (l.in.empty() || l.out.empty()) throw AssignmentError(name + ": empty layout");
    for (size_t d = 0; d < l.out.size(); ++d) {
      auto vis = detail::visible_blocks(l.in, l.out[d].state);
      if (vis.empty())
        throw AssignmentError(name + ": output block " + std::to_string(d) +
                              " sees no input subsection");
      int w = 0;
      for (int j : vis) w += l.in[j].width;
      l.fc.push_back(FcLayer::make(ps, name + ".blk" + std::to_string(d), w,
                                   l.out[d].width, rng));
      l.visible.push_back(std::move(vis));
    }
    return l;
  }

  // Pre-sliced input blocks avoid re-slicing when several layers share them.
  std::vector<Var> slice_inputs(Tape& t, Var x) const {
    const auto off = detail::block_offsets(in);
    if (t.g.cols(x) != off.back()) throw ShapeError("dc input width mismatch");
    std::vector<Var> parts;
    for (size_t j = 0; j < in.size(); ++j)
      parts.push_back(t.g.slice_cols(x, off[j], in[j].width));
    return parts;
  }

  Var apply_block(Tape& t, const std::vector<Var>& in_parts, size_t d) const {
    std::vector<Var> vs;
    for (int j : visible[d]) vs.push_back(in_parts[j]);
    Var xb = vs.size() == 1 ? vs[0] : t.g.concat_cols(vs);
    return fc[d].apply(t, xb);
  }

  Var apply(Tape& t, Var x) const {
    const auto parts = slice_inputs(t, x);
    std::vector<Var> outs;
    for (size_t d = 0; d < out.size(); ++d) outs.push_back(apply_block(t, parts, d));
    return outs.size() == 1 ? outs[0] : t.g.concat_cols(outs);
  }
};

// Density-assigned MLP: a DC where every output block gets its own LN + AVN.
struct DmlpLayer {
  DcLayer dc;
  std::vector<ParamTensor*> ln_g, ln_b;

  static DmlpLayer make(ParamStore& ps, const std::string& name, Layout in, Layout out, Rng& rng) {
    DmlpLayer l;
    l.dc = DcLayer::make(ps, name, std::move(in), std::move(out), rng);
    for (size_t d = 0; d < l.dc.out.size(); ++d) {
      const std::string bn = name + ".blk" + std::to_string(d);
      l.ln_g.push_back(&ps.constant(bn + ".ln_g", 1, l.dc.out[d].width, 1.0, rng));
      l.ln_b.push_back(&ps.constant(bn + ".ln_b", 1, l.dc.out[d].width, 0.0, rng));
    }
    return l;
  }

  Var apply(Tape& t, Var x) const {
    const auto parts = dc.slice_inputs(t, x);
    std::vector<Var> outs;
    for (size_t d = 0; d < dc.out.size(); ++d) {
      Var y = dc.apply_block(t, parts, d);
      y = t.g.layer_norm(y, t.param(*ln_g[d]), t.param(*ln_b[d]), kLnEps);
      outs.push_back(t.g.leaky_relu(y, kReluSlope));
    }
    return outs.size() == 1 ? outs[0] : t.g.concat_cols(outs);
  }
};

// Attention gate: scores from a layout-respecting DC, softmax within each
// block's feature span, multiplied back onto the features. A single-block
// layout reduces to square FC + softmax over the whole feature axis.
struct AttentionLayer {
  DcLayer scores;

  static AttentionLayer make(ParamStore& ps, const std::string& name, const Layout& layout,
                             Rng& rng) {
    return {DcLayer::make(ps, name, layout, layout, rng)};
  }

  Var apply(Tape& t, Var x) const {
    Var s = scores.apply(t, x);
    const auto off = detail::block_offsets(scores.out);
    std::vector<Var> gates;
    for (size_t d = 0; d < scores.out.size(); ++d)
      gates.push_back(t.g.softmax_rows(t.g.slice_cols(s, off[d], scores.out[d].width)));
    Var gate = gates.size() == 1 ? gates[0] : t.g.concat_cols(gates);
    return t.g.hadamard(gate, x);
  }
};

}  // namespace hdv
