#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hdv/cloud.hpp"
#include "hdv/kdtree.hpp"
#include "hdv/layers.hpp"
#include "hdv/params.hpp"
#include "hdv/rng.hpp"
#include "hdv/tensor.hpp"

// Shared test utilities: random data builders, plain-matrix math for oracles,
// and a central-difference gradient checker over ParamStore tensors.

namespace tst {

using namespace hdv;

inline PointCloud random_cloud(int n, Rng& rng, bool grid = false, int classes = 0,
                               double extent = 5.0) {
  PointCloud c;
  for (int i = 0; i < n; ++i) {
    c.pos.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                     rng.uniform(-extent, extent)});
    c.color.push_back({rng.next_double(), rng.next_double(), rng.next_double()});
    if (grid) {
      c.scan_row.push_back(static_cast<uint32_t>(rng.next_below(64)));
      c.scan_col.push_back(static_cast<uint32_t>(rng.next_below(256)));
    }
    if (classes > 0) c.label.push_back(static_cast<uint16_t>(rng.next_below(classes)));
  }
  return c;
}

inline Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (double& v : m.a) v = rng.uniform(lo, hi);
  return m;
}

// ---- plain-matrix math used by oracles (no Graph involvement) ----

inline Mat mm(const Mat& x, const Mat& w) {
  Mat y(x.rows, w.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < w.cols; ++j) {
      double acc = 0;
      for (int k = 0; k < x.cols; ++k) acc += x(i, k) * w(k, j);
      y(i, j) = acc;
    }
  return y;
}

inline Mat add_row(const Mat& x, const Mat& b) {
  Mat y = x;
  for (int i = 0; i < y.rows; ++i)
    for (int j = 0; j < y.cols; ++j) y(i, j) += b(0, j);
  return y;
}

inline Mat ln_rows(const Mat& x, const Mat& g, const Mat& b, double eps) {
  Mat y(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    double mu = 0;
    for (int j = 0; j < x.cols; ++j) mu += x(i, j);
    mu /= x.cols;
    double var = 0;
    for (int j = 0; j < x.cols; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= x.cols;
    const double is = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < x.cols; ++j) y(i, j) = (x(i, j) - mu) * is * g(0, j) + b(0, j);
  }
  return y;
}

inline Mat leaky(const Mat& x, double slope) {
  Mat y = x;
  for (double& v : y.a)
    if (v <= 0.0) v *= slope;
  return y;
}

inline Mat softmax_span(const Mat& x, int c0, int width) {
  Mat y = x;
  for (int i = 0; i < x.rows; ++i) {
    double mx = x(i, c0);
    for (int j = 1; j < width; ++j) mx = std::max(mx, x(i, c0 + j));
    double z = 0;
    for (int j = 0; j < width; ++j) {
      y(i, c0 + j) = std::exp(x(i, c0 + j) - mx);
      z += y(i, c0 + j);
    }
    for (int j = 0; j < width; ++j) y(i, c0 + j) /= z;
  }
  return y;
}

inline Mat concat(const Mat& a, const Mat& b) {
  Mat y(a.rows, a.cols + b.cols);
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < a.cols; ++j) y(i, j) = a(i, j);
    for (int j = 0; j < b.cols; ++j) y(i, a.cols + j) = b(i, j);
  }
  return y;
}

inline Mat slice(const Mat& x, int c0, int width) {
  Mat y(x.rows, width);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < width; ++j) y(i, j) = x(i, c0 + j);
  return y;
}

// Plain MLP forward from named parameters: leaky(LN(x W + b)).
inline Mat mlp_ref(ParamStore& ps, const std::string& name, const Mat& x) {
  Mat y = add_row(mm(x, ps.get(name + ".W").value), ps.get(name + ".b").value);
  y = ln_rows(y, ps.get(name + ".ln_g").value, ps.get(name + ".ln_b").value, kLnEps);
  return leaky(y, kReluSlope);
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  double m = 0;
  for (size_t i = 0; i < a.count(); ++i) m = std::max(m, std::abs(a.a[i] - b.a[i]));
  return m;
}

// ---- gradient checking ----

// Central differences on every unlocked parameter, sampling up to
// max_per_tensor entries of each tensor. fwd must build the same scalar graph
// from the store's current values on every call.
template <typename Fwd>
double fd_check(ParamStore& ps, Fwd&& fwd, double eps = 1e-5, uint64_t sample_seed = 0,
                int max_per_tensor = 4) {
  ps.zero_grads();
  {
    Tape t;
    Var loss = fwd(t);
    t.backward_accumulate(loss);
  }
  auto eval = [&] {
    Tape t;
    Var loss = fwd(t);
    return t.g.val(loss)(0, 0);
  };
  double worst = 0.0;
  Rng rng(sample_seed ^ 0xfdc0ffee);
  for (size_t pi = 0; pi < ps.size(); ++pi) {
    ParamTensor& p = ps.at(pi);
    if (p.locked) continue;
    const size_t n = p.value.count();
    const size_t trials = std::min<size_t>(static_cast<size_t>(max_per_tensor), n);
    for (size_t s = 0; s < trials; ++s) {
      const size_t j = n <= static_cast<size_t>(max_per_tensor) ? s : rng.next_below(n);
      const double save = p.value.a[j];
      p.value.a[j] = save + eps;
      const double fp = eval();
      p.value.a[j] = save - eps;
      const double fm = eval();
      p.value.a[j] = save;
      const double fd = (fp - fm) / (2 * eps);
      const double an = p.grad.a[j];
      const double denom = std::max(std::max(std::abs(fd), std::abs(an)), 1e-6);
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

// A tiny neighbor table over explicit positions, brute force.
inline NeighborTable brute_knn(const std::vector<Vec3>& pts, int k) {
  const int n = static_cast<int>(pts.size());
  NeighborTable t;
  t.n = n;
  t.k = k;
  t.idx.resize(static_cast<size_t>(n) * k);
  t.dist.resize(static_cast<size_t>(n) * k);
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> cand;
    for (int j = 0; j < n; ++j)
      if (j != i) cand.push_back({dist2(pts[i], pts[j]), j});
    std::sort(cand.begin(), cand.end());
    for (int j = 0; j < k; ++j) {
      t.idx[static_cast<size_t>(i) * k + j] = cand[j].second;
      t.dist[static_cast<size_t>(i) * k + j] = std::sqrt(cand[j].first);
    }
  }
  return t;
}

}  // namespace tst
