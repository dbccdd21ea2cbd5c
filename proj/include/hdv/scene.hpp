#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "hdv/cloud.hpp"
#include "hdv/error.hpp"
#include "hdv/rng.hpp"

// Synthetic labeled scans: a spherical ray scan over analytic primitives.
// Range noise is Gaussian; density falls with distance squared, so walls at
// different ranges land in different density groups.

namespace hdv {

struct Primitive {
  std::string kind;  // rect | sphere
  uint16_t label = 0;
  std::array<double, 3> albedo{0.5, 0.5, 0.5};
  Vec3 origin{}, u{}, v{};  // rect: parallelogram origin + edges
  Vec3 center{};            // sphere
  double radius = 1.0;
};

struct SceneSpec {
  Vec3 scanner{0, 0, 0};
  int rows = 64;
  int cols = 256;
  double fov_up_deg = 15.0;
  double fov_down_deg = -25.0;
  double az_start_deg = 0.0;
  double az_span_deg = 360.0;
  double max_range = 50.0;
  double noise_sigma = 0.0;
  int min_points = 256;
  std::vector<std::string> class_names;
  std::vector<Primitive> primitives;

  void validate() const {
    if (rows < 1 || cols < 1) throw ValidationError("scan grid must be at least 1x1");
    if (!(max_range > 0.0)) throw ValidationError("max_range must be positive");
    if (noise_sigma < 0.0) throw ValidationError("noise_sigma must be non-negative");
    if (!(az_span_deg > 0.0)) throw ValidationError("azimuth span must be positive");
    if (fov_up_deg < fov_down_deg) throw ValidationError("fov_up below fov_down");
    if (primitives.empty()) throw ValidationError("scene has no primitives");
    for (const auto& p : primitives) {
      if (p.kind != "rect" && p.kind != "sphere")
        throw ValidationError("primitive kind must be rect or sphere");
      if (p.kind == "sphere" && !(p.radius > 0.0))
        throw ValidationError("sphere radius must be positive");
      for (double a : p.albedo)
        if (a < 0.0 || a > 1.0) throw ValidationError("albedo outside [0,1]");
    }
  }
};

namespace detail {

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ParseError("expected a 3-element array");
  return Vec3{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

// Ray hit distance, or +inf on miss.
inline double hit_rect(const Primitive& p, const Vec3& ro, const Vec3& dir) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const Vec3 n = p.u.cross(p.v);
  const double denom = n.dot(dir);
  if (std::fabs(denom) < 1e-12) return inf;
  const double t = n.dot(p.origin - ro) / denom;
  if (t <= 1e-9) return inf;
  const Vec3 w = ro + dir * t - p.origin;
  const double a = p.u.dot(p.u), b = p.u.dot(p.v), c = p.v.dot(p.v);
  const double det = a * c - b * b;
  if (std::fabs(det) < 1e-18) return inf;
  const double s = (c * w.dot(p.u) - b * w.dot(p.v)) / det;
  const double q = (a * w.dot(p.v) - b * w.dot(p.u)) / det;
  if (s < 0.0 || s > 1.0 || q < 0.0 || q > 1.0) return inf;
  return t;
}

inline double hit_sphere(const Primitive& p, const Vec3& ro, const Vec3& dir) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const Vec3 oc = ro - p.center;
  const double b = oc.dot(dir);
  const double c = oc.dot(oc) - p.radius * p.radius;
  const double disc = b * b - c;
  if (disc < 0.0) return inf;
  const double root = std::sqrt(disc);
  double t = -b - root;
  if (t <= 1e-9) t = -b + root;
  return t > 1e-9 ? t : inf;
}

}  // namespace detail

inline SceneSpec parse_scene_spec(const nlohmann::json& j) {
  SceneSpec s;
  try {
    if (j.contains("scanner")) s.scanner = detail::vec3_from_json(j.at("scanner"));
    if (j.contains("rows")) s.rows = j.at("rows").get<int>();
    if (j.contains("cols")) s.cols = j.at("cols").get<int>();
    if (j.contains("fov_up_deg")) s.fov_up_deg = j.at("fov_up_deg").get<double>();
    if (j.contains("fov_down_deg")) s.fov_down_deg = j.at("fov_down_deg").get<double>();
    if (j.contains("az_start_deg")) s.az_start_deg = j.at("az_start_deg").get<double>();
    if (j.contains("az_span_deg")) s.az_span_deg = j.at("az_span_deg").get<double>();
    if (j.contains("max_range")) s.max_range = j.at("max_range").get<double>();
    if (j.contains("noise_sigma")) s.noise_sigma = j.at("noise_sigma").get<double>();
    if (j.contains("min_points")) s.min_points = j.at("min_points").get<int>();
    if (j.contains("class_names"))
      s.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& pj : j.value("primitives", nlohmann::json::array())) {
      Primitive p;
      p.kind = pj.at("kind").get<std::string>();
      p.label = pj.at("label").get<uint16_t>();
      if (pj.contains("albedo")) {
        auto a = pj.at("albedo");
        if (!a.is_array() || a.size() != 3) throw ParseError("albedo must have 3 entries");
        for (int i = 0; i < 3; ++i) p.albedo[i] = a[i].get<double>();
      }
      if (p.kind == "rect") {
        p.origin = detail::vec3_from_json(pj.at("origin"));
        p.u = detail::vec3_from_json(pj.at("u"));
        p.v = detail::vec3_from_json(pj.at("v"));
      } else {
        p.center = detail::vec3_from_json(pj.at("center"));
        p.radius = pj.at("radius").get<double>();
      }
      s.primitives.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline SceneSpec load_scene_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open scene spec " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return parse_scene_spec(j);
}

namespace detail {

struct ScanRow {
  std::vector<Vec3> pos;
  std::vector<std::array<double, 3>> color;
  std::vector<uint32_t> col;
  std::vector<uint16_t> label;
};

// Rows are independent given their forked streams, so worker layout cannot
// change the output.
inline ScanRow cast_row(const SceneSpec& spec, int row, Rng rng) {
  constexpr double kDeg = 3.14159265358979323846 / 180.0;
  const double elev =
      spec.rows == 1 ? spec.fov_up_deg
                     : spec.fov_down_deg +
                           (spec.fov_up_deg - spec.fov_down_deg) * row / (spec.rows - 1.0);
  const double ce = std::cos(elev * kDeg), se = std::sin(elev * kDeg);
  ScanRow out;
  for (int col = 0; col < spec.cols; ++col) {
    const double az = (spec.az_start_deg + spec.az_span_deg * col / spec.cols) * kDeg;
    const Vec3 dir{ce * std::cos(az), ce * std::sin(az), se};
    double best = std::numeric_limits<double>::infinity();
    int hit = -1;
    for (size_t p = 0; p < spec.primitives.size(); ++p) {
      const auto& prim = spec.primitives[p];
      const double t = prim.kind == "rect" ? detail::hit_rect(prim, spec.scanner, dir)
                                           : detail::hit_sphere(prim, spec.scanner, dir);
      if (t < best) {
        best = t;
        hit = static_cast<int>(p);
      }
    }
    if (hit < 0 || best > spec.max_range) continue;
    double t = best;
    if (spec.noise_sigma > 0.0) t = std::max(best + spec.noise_sigma * rng.normal(), 1e-6);
    const auto& prim = spec.primitives[hit];
    out.pos.push_back(spec.scanner + dir * t);
    out.color.push_back(prim.albedo);
    out.col.push_back(static_cast<uint32_t>(col));
    out.label.push_back(prim.label);
  }
  return out;
}

}  // namespace detail

inline PointCloud generate_scene(const SceneSpec& spec, uint64_t seed, int threads = 1) {
  spec.validate();
  Rng base(seed);
  std::vector<detail::ScanRow> rows(spec.rows);
  const int workers = std::max(1, std::min(threads, spec.rows));
  if (workers == 1) {
    for (int r = 0; r < spec.rows; ++r)
      rows[r] = detail::cast_row(spec, r, base.fork(static_cast<uint64_t>(r) + 1));
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (int r = w; r < spec.rows; r += workers)
          rows[r] = detail::cast_row(spec, r, base.fork(static_cast<uint64_t>(r) + 1));
      });
    for (auto& t : pool) t.join();
  }

  PointCloud cloud;
  for (int r = 0; r < spec.rows; ++r) {
    const auto& sr = rows[r];
    for (size_t i = 0; i < sr.pos.size(); ++i) {
      cloud.pos.push_back(sr.pos[i]);
      cloud.color.push_back(sr.color[i]);
      cloud.scan_row.push_back(static_cast<uint32_t>(r));
      cloud.scan_col.push_back(sr.col[i]);
      cloud.label.push_back(sr.label[i]);
    }
  }
  if (static_cast<int>(cloud.size()) < spec.min_points)
    throw SpecTooSparse("scene yields " + std::to_string(cloud.size()) + " points, need " +
                        std::to_string(spec.min_points));
  cloud.validate();
  return cloud;
}

}  // namespace hdv
