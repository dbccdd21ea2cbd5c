#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "hdv/error.hpp"

namespace hdv {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm2() const { return dot(*this); }
  double norm() const { return std::sqrt(norm2()); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline double dist2(const Vec3& a, const Vec3& b) { return (a - b).norm2(); }

// Column-oriented point cloud. Colors live in [0,1]. scan_row/scan_col carry
// the sensor's angular grid indices; either both present or both absent, and
// labels are present for all points or none.
struct PointCloud {
  std::vector<Vec3> pos;
  std::vector<std::array<double, 3>> color;
  std::vector<uint32_t> scan_row, scan_col;
  std::vector<uint16_t> label;

  size_t size() const { return pos.size(); }
  bool has_scan_grid() const { return !scan_row.empty(); }
  bool has_labels() const { return !label.empty(); }

  void validate() const {
    if (color.size() != pos.size())
      throw ValidationError("color count != point count");
    if (scan_row.size() != scan_col.size())
      throw ValidationError("scan_row/scan_col must be paired");
    if (!scan_row.empty() && scan_row.size() != pos.size())
      throw ValidationError("scan grid present for a strict subset of points");
    if (!label.empty() && label.size() != pos.size())
      throw ValidationError("labels present for a strict subset of points");
    for (const auto& p : pos)
      if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
        throw ValidationError("non-finite coordinate");
    for (const auto& c : color)
      for (double v : c)
        if (!std::isfinite(v) || v < 0.0 || v > 1.0)
          throw ValidationError("color outside [0,1]");
  }

  // Subset preserving per-point attributes, in the order given by idx.
  PointCloud select(const std::vector<int>& idx) const {
    PointCloud out;
    out.pos.reserve(idx.size());
    out.color.reserve(idx.size());
    const bool grid = has_scan_grid(), lab = has_labels();
    for (int i : idx) {
      out.pos.push_back(pos[i]);
      out.color.push_back(color[i]);
      if (grid) {
        out.scan_row.push_back(scan_row[i]);
        out.scan_col.push_back(scan_col[i]);
      }
      if (lab) out.label.push_back(label[i]);
    }
    return out;
  }
};

}  // namespace hdv
