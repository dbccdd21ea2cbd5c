#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hdv/cloud.hpp"
#include "hdv/error.hpp"

// Exact k-nearest-neighbour search. Candidates are ordered by the total order
// (squared distance, point index), which makes every result set unique and
// hence independent of tree shape or traversal order. Ties in distance always
// resolve to the smaller index.

namespace hdv {

struct NeighborTable {
  int n = 0, k = 0;
  std::vector<int> idx;      // n*k, row i sorted ascending by (dist, idx)
  std::vector<double> dist;  // matching distances (not squared)

  int at(int i, int j) const { return idx[static_cast<size_t>(i) * k + j]; }
  double dist_at(int i, int j) const { return dist[static_cast<size_t>(i) * k + j]; }
  double radius(int i) const { return dist_at(i, k - 1); }
};

class SpatialIndex {
 public:
  explicit SpatialIndex(const std::vector<Vec3>& pts) : pts_(pts) {
    if (pts_.empty()) throw InsufficientPoints("cannot index an empty cloud");
    order_.resize(pts_.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    nodes_.reserve(2 * pts_.size() / kLeafSize + 4);
    root_ = build(0, static_cast<int>(pts_.size()));
  }

  int size() const { return static_cast<int>(pts_.size()); }
  const std::vector<Vec3>& points() const { return pts_; }

  // k nearest to q under (d2, idx); pass exclude >= 0 to drop that index.
  // Safe to call concurrently: all query state is local.
  void query(const Vec3& q, int k, int exclude, std::vector<int>& out_idx,
             std::vector<double>& out_d2) const {
    const int avail = size() - (exclude >= 0 ? 1 : 0);
    if (k < 1 || k > avail)
      throw InsufficientPoints("knn k=" + std::to_string(k) + " with " +
                               std::to_string(avail) + " candidates");
    std::vector<std::pair<double, int>> heap;
    heap.reserve(k + 1);
    search(root_, q, k, exclude, heap);
    out_idx.resize(k);
    out_d2.resize(k);
    std::sort(heap.begin(), heap.end());
    for (int j = 0; j < k; ++j) {
      out_d2[j] = heap[j].first;
      out_idx[j] = heap[j].second;
    }
  }

  int nearest(const Vec3& q) const {
    std::vector<int> i;
    std::vector<double> d;
    query(q, 1, -1, i, d);
    return i[0];
  }

 private:
  static constexpr int kLeafSize = 12;
  struct Node {
    int left = -1, right = -1;
    int axis = 0;
    double split = 0;
    int begin = 0, end = 0;  // leaf range into order_
  };

  int build(int begin, int end) {
    Node nd;
    nd.begin = begin;
    nd.end = end;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(nd);
    if (end - begin <= kLeafSize) return id;

    Vec3 lo = pts_[order_[begin]], hi = lo;
    for (int i = begin + 1; i < end; ++i) {
      const Vec3& p = pts_[order_[i]];
      lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
      hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
    const Vec3 ext = hi - lo;
    int axis = 0;
    if (ext.y > ext[axis]) axis = 1;
    if (ext.z > ext[axis]) axis = 2;
    if (ext[axis] <= 0.0) return id;  // all points coincide: keep as leaf

    const int mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) { return pts_[a][axis] < pts_[b][axis]; });
    nodes_[id].axis = axis;
    nodes_[id].split = pts_[order_[mid]][axis];
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  using Heap = std::vector<std::pair<double, int>>;

  void consider(const Vec3& q, int k, int exclude, int pi, Heap& heap) const {
    if (pi == exclude) return;
    const double d2 = dist2(q, pts_[pi]);
    const std::pair<double, int> cand{d2, pi};
    if (static_cast<int>(heap.size()) < k) {
      heap.push_back(cand);
      std::push_heap(heap.begin(), heap.end());
    } else if (cand < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = cand;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  void search(int id, const Vec3& q, int k, int exclude, Heap& heap) const {
    const Node& nd = nodes_[id];
    if (nd.left < 0) {
      for (int i = nd.begin; i < nd.end; ++i) consider(q, k, exclude, order_[i], heap);
      return;
    }
    const double delta = q[nd.axis] - nd.split;
    const int near = delta < 0 ? nd.left : nd.right;
    const int far = delta < 0 ? nd.right : nd.left;
    search(near, q, k, exclude, heap);
    // Equality matters: a point exactly at the current worst distance but with
    // a smaller index may still displace it.
    if (static_cast<int>(heap.size()) < k || delta * delta <= heap.front().first)
      search(far, q, k, exclude, heap);
  }

  std::vector<Vec3> pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = 0;
};

inline SpatialIndex build_index(const PointCloud& cloud) { return SpatialIndex(cloud.pos); }

// Full table: for every indexed point, its k nearest neighbours excluding the
// point itself. Requires n > k.
inline NeighborTable knn(const SpatialIndex& index, int k) {
  const int n = index.size();
  if (k < 1) throw ContractError("knn requires k >= 1");
  if (n <= k)
    throw InsufficientPoints("knn requires n > k (n=" + std::to_string(n) +
                             ", k=" + std::to_string(k) + ")");
  NeighborTable t;
  t.n = n;
  t.k = k;
  t.idx.resize(static_cast<size_t>(n) * k);
  t.dist.resize(static_cast<size_t>(n) * k);
  std::vector<int> ii;
  std::vector<double> dd;
  for (int i = 0; i < n; ++i) {
    index.query(index.points()[i], k, i, ii, dd);
    for (int j = 0; j < k; ++j) {
      t.idx[static_cast<size_t>(i) * k + j] = ii[j];
      t.dist[static_cast<size_t>(i) * k + j] = std::sqrt(dd[j]);
    }
  }
  return t;
}

}  // namespace hdv
