#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hdv/error.hpp"

// Dense 64-bit matrices and a reverse-mode tape. A Graph is built per forward
// pass; backward() walks the tape once in reverse creation order. Every op is
// deterministic and single-threaded.

namespace hdv {

struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
  double* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }
  size_t count() const { return a.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Mat v, bool needs_grad) {
    nodes_.push_back({std::move(v), {}, needs_grad, {}});
    return {static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& val(Var v) const { return nodes_[check(v)].val; }
  const Mat& grad(Var v) const { return nodes_[check(v)].grad; }
  int rows(Var v) const { return val(v).rows; }
  int cols(Var v) const { return val(v).cols; }

  Var matmul(Var xv, Var wv) {
    const Mat &x = val(xv), &w = val(wv);
    if (x.cols != w.rows) throw ShapeError("matmul " + shape(xv) + " x " + shape(wv));
    Mat y(x.rows, w.cols);
    for (int i = 0; i < x.rows; ++i) {
      const double* xi = x.row(i);
      double* yi = y.row(i);
      for (int k = 0; k < x.cols; ++k) {
        const double s = xi[k];
        if (s == 0.0) continue;
        const double* wk = w.row(k);
        for (int j = 0; j < w.cols; ++j) yi[j] += s * wk[j];
      }
    }
    return make(std::move(y), {xv, wv}, [this, xv, wv](const Mat& gy) {
      const Mat &x = val(xv), &w = val(wv);
      if (wants(xv)) {
        Mat& gx = gsink(xv);
        for (int i = 0; i < x.rows; ++i) {
          const double* gyi = gy.row(i);
          double* gxi = gx.row(i);
          for (int k = 0; k < x.cols; ++k) {
            const double* wk = w.row(k);
            double acc = 0;
            for (int j = 0; j < w.cols; ++j) acc += gyi[j] * wk[j];
            gxi[k] += acc;
          }
        }
      }
      if (wants(wv)) {
        Mat& gw = gsink(wv);
        for (int i = 0; i < x.rows; ++i) {
          const double* xi = x.row(i);
          const double* gyi = gy.row(i);
          for (int k = 0; k < x.cols; ++k) {
            const double s = xi[k];
            if (s == 0.0) continue;
            double* gwk = gw.row(k);
            for (int j = 0; j < w.cols; ++j) gwk[j] += s * gyi[j];
          }
        }
      }
    });
  }

  // b is a 1 x cols row broadcast over rows.
  Var add_bias(Var xv, Var bv) {
    const Mat &x = val(xv), &b = val(bv);
    if (b.rows != 1 || b.cols != x.cols) throw ShapeError("add_bias " + shape(xv) + " + " + shape(bv));
    Mat y = x;
    for (int i = 0; i < y.rows; ++i) {
      double* yi = y.row(i);
      for (int j = 0; j < y.cols; ++j) yi[j] += b(0, j);
    }
    return make(std::move(y), {xv, bv}, [this, xv, bv](const Mat& gy) {
      if (wants(xv)) {
        Mat& gx = gsink(xv);
        for (size_t i = 0; i < gy.count(); ++i) gx.a[i] += gy.a[i];
      }
      if (wants(bv)) {
        Mat& gb = gsink(bv);
        for (int i = 0; i < gy.rows; ++i)
          for (int j = 0; j < gy.cols; ++j) gb(0, j) += gy(i, j);
      }
    });
  }

  Var add(Var xv, Var yv) {
    const Mat &x = val(xv), &y = val(yv);
    if (!x.same_shape(y)) throw ShapeError("add " + shape(xv) + " + " + shape(yv));
    Mat z = x;
    for (size_t i = 0; i < z.count(); ++i) z.a[i] += y.a[i];
    return make(std::move(z), {xv, yv}, [this, xv, yv](const Mat& gz) {
      for (Var v : {xv, yv})
        if (wants(v)) {
          Mat& g = gsink(v);
          for (size_t i = 0; i < gz.count(); ++i) g.a[i] += gz.a[i];
        }
    });
  }

  Var scale(Var xv, double c) {
    Mat y = val(xv);
    for (double& v : y.a) v *= c;
    return make(std::move(y), {xv}, [this, xv, c](const Mat& gy) {
      if (!wants(xv)) return;
      Mat& gx = gsink(xv);
      for (size_t i = 0; i < gy.count(); ++i) gx.a[i] += c * gy.a[i];
    });
  }

  Var hadamard(Var xv, Var yv) {
    const Mat &x = val(xv), &y = val(yv);
    if (!x.same_shape(y)) throw ShapeError("hadamard " + shape(xv) + " * " + shape(yv));
    Mat z = x;
    for (size_t i = 0; i < z.count(); ++i) z.a[i] *= y.a[i];
    return make(std::move(z), {xv, yv}, [this, xv, yv](const Mat& gz) {
      const Mat &x = val(xv), &y = val(yv);
      if (wants(xv)) {
        Mat& gx = gsink(xv);
        for (size_t i = 0; i < gz.count(); ++i) gx.a[i] += gz.a[i] * y.a[i];
      }
      if (wants(yv)) {
        Mat& gy = gsink(yv);
        for (size_t i = 0; i < gz.count(); ++i) gy.a[i] += gz.a[i] * x.a[i];
      }
    });
  }

  // Multiply every column of row i by s(i, 0).
  Var row_scale(Var xv, Var sv) {
    const Mat &x = val(xv), &s = val(sv);
    if (s.rows != x.rows || s.cols != 1) throw ShapeError("row_scale " + shape(xv) + " by " + shape(sv));
    Mat y = x;
    for (int i = 0; i < y.rows; ++i) {
      const double c = s(i, 0);
      double* yi = y.row(i);
      for (int j = 0; j < y.cols; ++j) yi[j] *= c;
    }
    return make(std::move(y), {xv, sv}, [this, xv, sv](const Mat& gy) {
      const Mat &x = val(xv), &s = val(sv);
      if (wants(xv)) {
        Mat& gx = gsink(xv);
        for (int i = 0; i < gy.rows; ++i) {
          const double c = s(i, 0);
          const double* gyi = gy.row(i);
          double* gxi = gx.row(i);
          for (int j = 0; j < gy.cols; ++j) gxi[j] += c * gyi[j];
        }
      }
      if (wants(sv)) {
        Mat& gs = gsink(sv);
        for (int i = 0; i < gy.rows; ++i) {
          const double* gyi = gy.row(i);
          const double* xi = x.row(i);
          double acc = 0;
          for (int j = 0; j < gy.cols; ++j) acc += gyi[j] * xi[j];
          gs(i, 0) += acc;
        }
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    int total = 0;
    const int r = rows(parts[0]);
    for (Var p : parts) {
      if (rows(p) != r) throw ShapeError("concat_cols row mismatch");
      total += cols(p);
    }
    Mat y(r, total);
    int off = 0;
    for (Var p : parts) {
      const Mat& x = val(p);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < x.cols; ++j) y(i, off + j) = x(i, j);
      off += x.cols;
    }
    auto ps = parts;
    return make(std::move(y), parts, [this, ps](const Mat& gy) {
      int off = 0;
      for (Var p : ps) {
        const int c = cols(p);
        if (wants(p)) {
          Mat& gx = gsink(p);
          for (int i = 0; i < gy.rows; ++i)
            for (int j = 0; j < c; ++j) gx(i, j) += gy(i, off + j);
        }
        off += c;
      }
    });
  }

  Var slice_cols(Var xv, int c0, int width) {
    const Mat& x = val(xv);
    if (c0 < 0 || width < 0 || c0 + width > x.cols) throw ShapeError("slice_cols out of range");
    Mat y(x.rows, width);
    for (int i = 0; i < x.rows; ++i)
      for (int j = 0; j < width; ++j) y(i, j) = x(i, c0 + j);
    return make(std::move(y), {xv}, [this, xv, c0, width](const Mat& gy) {
      if (!wants(xv)) return;
      Mat& gx = gsink(xv);
      for (int i = 0; i < gy.rows; ++i)
        for (int j = 0; j < width; ++j) gx(i, c0 + j) += gy(i, j);
    });
  }

  Var gather_rows(Var xv, std::vector<int> idx) {
    const Mat& x = val(xv);
    for (int i : idx)
      if (i < 0 || i >= x.rows) throw ShapeError("gather_rows index out of range");
    Mat y(static_cast<int>(idx.size()), x.cols);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < x.cols; ++j) y(static_cast<int>(i), j) = x(idx[i], j);
    return make(std::move(y), {xv}, [this, xv, idx = std::move(idx)](const Mat& gy) {
      if (!wants(xv)) return;
      Mat& gx = gsink(xv);
      for (size_t i = 0; i < idx.size(); ++i) {
        const double* gyi = gy.row(static_cast<int>(i));
        double* gxi = gx.row(idx[i]);
        for (int j = 0; j < gy.cols; ++j) gxi[j] += gyi[j];
      }
    });
  }

  // Rows come grouped in consecutive blocks of `group`; output one mean row
  // per block.
  Var mean_pool_rows(Var xv, int group) {
    const Mat& x = val(xv);
    if (group < 1 || x.rows % group != 0) throw ShapeError("mean_pool_rows group mismatch");
    const int n = x.rows / group;
    Mat y(n, x.cols);
    for (int i = 0; i < n; ++i) {
      double* yi = y.row(i);
      for (int g = 0; g < group; ++g) {
        const double* xr = x.row(i * group + g);
        for (int j = 0; j < x.cols; ++j) yi[j] += xr[j];
      }
      for (int j = 0; j < x.cols; ++j) yi[j] /= group;
    }
    return make(std::move(y), {xv}, [this, xv, group](const Mat& gy) {
      if (!wants(xv)) return;
      Mat& gx = gsink(xv);
      for (int i = 0; i < gy.rows; ++i) {
        const double* gyi = gy.row(i);
        for (int g = 0; g < group; ++g) {
          double* gxr = gx.row(i * group + g);
          for (int j = 0; j < gy.cols; ++j) gxr[j] += gyi[j] / group;
        }
      }
    });
  }

  // Mean over the rows of each block whose mask is nonzero; a block with no
  // surviving rows yields the zero row and routes no gradient.
  Var masked_mean_pool_rows(Var xv, int group, std::vector<double> mask) {
    const Mat& x = val(xv);
    if (group < 1 || x.rows % group != 0) throw ShapeError("masked_mean_pool_rows group mismatch");
    if (mask.size() != static_cast<size_t>(x.rows)) throw ShapeError("mask length != rows");
    const int n = x.rows / group;
    std::vector<double> inv_count(n, 0.0);
    for (int i = 0; i < n; ++i) {
      double c = 0;
      for (int g = 0; g < group; ++g) c += mask[i * group + g] != 0.0 ? 1.0 : 0.0;
      inv_count[i] = c > 0 ? 1.0 / c : 0.0;
    }
    Mat y(n, x.cols);
    for (int i = 0; i < n; ++i) {
      double* yi = y.row(i);
      for (int g = 0; g < group; ++g) {
        if (mask[i * group + g] == 0.0) continue;
        const double* xr = x.row(i * group + g);
        for (int j = 0; j < x.cols; ++j) yi[j] += xr[j];
      }
      for (int j = 0; j < x.cols; ++j) yi[j] *= inv_count[i];
    }
    return make(std::move(y), {xv},
                [this, xv, group, mask = std::move(mask), inv_count](const Mat& gy) {
                  if (!wants(xv)) return;
                  Mat& gx = gsink(xv);
                  for (int i = 0; i < gy.rows; ++i) {
                    const double* gyi = gy.row(i);
                    const double ic = inv_count[i];
                    if (ic == 0.0) continue;
                    for (int g = 0; g < group; ++g) {
                      if (mask[i * group + g] == 0.0) continue;
                      double* gxr = gx.row(i * group + g);
                      for (int j = 0; j < gy.cols; ++j) gxr[j] += gyi[j] * ic;
                    }
                  }
                });
  }

  // Per-row normalization over the feature axis with affine scale/shift
  // (gamma, beta are 1 x cols). Population variance, epsilon inside the root.
  Var layer_norm(Var xv, Var gv, Var bv, double eps) {
    const Mat &x = val(xv), &gm = val(gv), &bt = val(bv);
    if (gm.rows != 1 || gm.cols != x.cols || bt.rows != 1 || bt.cols != x.cols)
      throw ShapeError("layer_norm affine shape");
    const int C = x.cols;
    Mat xhat(x.rows, C);
    std::vector<double> inv_sigma(x.rows);
    for (int i = 0; i < x.rows; ++i) {
      const double* xi = x.row(i);
      double mu = 0;
      for (int j = 0; j < C; ++j) mu += xi[j];
      mu /= C;
      double var = 0;
      for (int j = 0; j < C; ++j) {
        const double d = xi[j] - mu;
        var += d * d;
      }
      var /= C;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[i] = is;
      double* hi = xhat.row(i);
      for (int j = 0; j < C; ++j) hi[j] = (xi[j] - mu) * is;
    }
    Mat y(x.rows, C);
    for (int i = 0; i < x.rows; ++i)
      for (int j = 0; j < C; ++j) y(i, j) = xhat(i, j) * gm(0, j) + bt(0, j);
    return make(std::move(y), {xv, gv, bv},
                [this, xv, gv, bv, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](const Mat& gy) {
                  const Mat& gm = val(gv);
                  const int C = gy.cols;
                  if (wants(gv)) {
                    Mat& gg = gsink(gv);
                    for (int i = 0; i < gy.rows; ++i)
                      for (int j = 0; j < C; ++j) gg(0, j) += gy(i, j) * xhat(i, j);
                  }
                  if (wants(bv)) {
                    Mat& gb = gsink(bv);
                    for (int i = 0; i < gy.rows; ++i)
                      for (int j = 0; j < C; ++j) gb(0, j) += gy(i, j);
                  }
                  if (wants(xv)) {
                    Mat& gx = gsink(xv);
                    for (int i = 0; i < gy.rows; ++i) {
                      double s1 = 0, s2 = 0;
                      for (int j = 0; j < C; ++j) {
                        const double dh = gy(i, j) * gm(0, j);
                        s1 += dh;
                        s2 += dh * xhat(i, j);
                      }
                      s1 /= C;
                      s2 /= C;
                      for (int j = 0; j < C; ++j) {
                        const double dh = gy(i, j) * gm(0, j);
                        gx(i, j) += inv_sigma[i] * (dh - s1 - xhat(i, j) * s2);
                      }
                    }
                  }
                });
  }

  Var leaky_relu(Var xv, double slope) {
    const Mat& x = val(xv);
    Mat y = x;
    for (double& v : y.a)
      if (v <= 0.0) v *= slope;
    return make(std::move(y), {xv}, [this, xv, slope](const Mat& gy) {
      if (!wants(xv)) return;
      const Mat& x = val(xv);
      Mat& gx = gsink(xv);
      for (size_t i = 0; i < gy.count(); ++i)
        gx.a[i] += gy.a[i] * (x.a[i] > 0.0 ? 1.0 : slope);
    });
  }

  Var softplus(Var xv) {
    const Mat& x = val(xv);
    Mat y = x;
    for (double& v : y.a) v = v > 30.0 ? v : std::log1p(std::exp(v));
    return make(std::move(y), {xv}, [this, xv](const Mat& gy) {
      if (!wants(xv)) return;
      const Mat& x = val(xv);
      Mat& gx = gsink(xv);
      for (size_t i = 0; i < gy.count(); ++i)
        gx.a[i] += gy.a[i] / (1.0 + std::exp(-x.a[i]));
    });
  }

  // Softmax over the full feature axis of each row.
  Var softmax_rows(Var xv) {
    const Mat& x = val(xv);
    Mat y(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
      const double* xi = x.row(i);
      double* yi = y.row(i);
      double mx = xi[0];
      for (int j = 1; j < x.cols; ++j) mx = std::max(mx, xi[j]);
      double z = 0;
      for (int j = 0; j < x.cols; ++j) {
        yi[j] = std::exp(xi[j] - mx);
        z += yi[j];
      }
      for (int j = 0; j < x.cols; ++j) yi[j] /= z;
    }
    const Mat ycopy = y;
    return make(std::move(y), {xv}, [this, xv, ycopy](const Mat& gy) {
      if (!wants(xv)) return;
      Mat& gx = gsink(xv);
      for (int i = 0; i < gy.rows; ++i) {
        const double* yi = ycopy.row(i);
        const double* gyi = gy.row(i);
        double dot = 0;
        for (int j = 0; j < gy.cols; ++j) dot += gyi[j] * yi[j];
        double* gxi = gx.row(i);
        for (int j = 0; j < gy.cols; ++j) gxi[j] += yi[j] * (gyi[j] - dot);
      }
    });
  }

  // Class-weighted masked cross entropy, averaged over masked rows. Empty
  // masks yield zero loss and zero gradient.
  Var softmax_xent(Var logits, std::vector<int> labels, std::vector<double> class_weights,
                   std::vector<uint8_t> mask) {
    const Mat& z = val(logits);
    const int n = z.rows, k = z.cols;
    if (labels.size() != static_cast<size_t>(n) || mask.size() != static_cast<size_t>(n))
      throw ShapeError("softmax_xent label/mask length");
    if (class_weights.size() != static_cast<size_t>(k)) throw ShapeError("class weight count");
    Mat probs(n, k);
    double loss = 0;
    int count = 0;
    for (int i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      ++count;
      const int lbl = labels[i];
      if (lbl < 0 || lbl >= k) throw ShapeError("label outside class range");
      const double* zi = z.row(i);
      double mx = zi[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, zi[j]);
      double sum = 0;
      double* pi = probs.row(i);
      for (int j = 0; j < k; ++j) {
        pi[j] = std::exp(zi[j] - mx);
        sum += pi[j];
      }
      for (int j = 0; j < k; ++j) pi[j] /= sum;
      loss += class_weights[lbl] * -(std::log(pi[lbl]));
    }
    Mat out(1, 1);
    out(0, 0) = count > 0 ? loss / count : 0.0;
    return make(std::move(out), {logits},
                [this, logits, labels = std::move(labels), class_weights = std::move(class_weights),
                 mask = std::move(mask), probs = std::move(probs), count](const Mat& gy) {
                  if (!wants(logits) || count == 0) return;
                  const double g = gy(0, 0) / count;
                  Mat& gz = gsink(logits);
                  for (int i = 0; i < gz.rows; ++i) {
                    if (!mask[i]) continue;
                    const double w = class_weights[labels[i]] * g;
                    const double* pi = probs.row(i);
                    double* gi = gz.row(i);
                    for (int j = 0; j < gz.cols; ++j)
                      gi[j] += w * (pi[j] - (j == labels[i] ? 1.0 : 0.0));
                  }
                });
  }

  // Weighted sum of 1x1 scalars.
  Var weighted_sum(const std::vector<std::pair<double, Var>>& terms) {
    Mat y(1, 1);
    for (const auto& [c, v] : terms) {
      if (rows(v) != 1 || cols(v) != 1) throw ShapeError("weighted_sum needs scalars");
      y(0, 0) += c * val(v)(0, 0);
    }
    std::vector<Var> parents;
    for (const auto& t : terms) parents.push_back(t.second);
    return make(std::move(y), parents, [this, terms](const Mat& gy) {
      for (const auto& [c, v] : terms)
        if (wants(v)) gsink(v)(0, 0) += c * gy(0, 0);
    });
  }

  void backward(Var root) {
    const int rid = check(root);
    if (val(root).rows != 1 || val(root).cols != 1)
      throw ShapeError("backward root must be 1x1");
    if (!nodes_[rid].needs_grad)
      throw ContractError("backward on a graph with no gradient paths");
    for (int i = 0; i <= rid; ++i)
      if (nodes_[i].needs_grad && !nodes_[i].grad.same_shape(nodes_[i].val))
        nodes_[i].grad = Mat(nodes_[i].val.rows, nodes_[i].val.cols);
    nodes_[rid].grad(0, 0) = 1.0;
    for (int i = rid; i >= 0; --i)
      if (nodes_[i].needs_grad && nodes_[i].back) nodes_[i].back(nodes_[i].grad);
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool needs_grad = false;
    std::function<void(const Mat&)> back;
  };

  int check(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw ContractError("variable from another graph");
    return v.id;
  }

  std::string shape(Var v) const {
    return "[" + std::to_string(val(v).rows) + "x" + std::to_string(val(v).cols) + "]";
  }

  bool wants(Var v) const { return nodes_[v.id].needs_grad; }
  Mat& gsink(Var v) { return nodes_[v.id].grad; }

  Var make(Mat y, const std::vector<Var>& parents, std::function<void(const Mat&)> back) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_[check(p)].needs_grad;
    Node nd;
    nd.val = std::move(y);
    nd.needs_grad = needs;
    if (needs) nd.back = std::move(back);
    nodes_.push_back(std::move(nd));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace hdv
