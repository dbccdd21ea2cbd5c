#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "hdv/cloud.hpp"
#include "hdv/error.hpp"

// Cloud interchange. Canonical format is binary little-endian PLY with 64-bit
// coordinates and colors (property double), uint scan_row/scan_col and ushort
// label when present; ASCII PLY and CSV are emitted with %.17g so that
// save -> load is the identity in every format. Loaders normalize 8-bit color
// properties to [0,1].

namespace hdv {

enum class CloudFormat { ply_binary, ply_ascii, csv };

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_le(const unsigned char* p, int n) {
  uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct PlyProp {
  std::string name;
  std::string type;
  int size = 0;  // bytes in binary encoding
};

inline int ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  return 0;
}

inline bool ply_type_unsigned(const std::string& t) {
  return t == "uchar" || t == "uint8" || t == "ushort" || t == "uint16" || t == "uint" || t == "uint32";
}

inline double decode_prop(const unsigned char* p, const PlyProp& pr) {
  const uint64_t raw = get_le(p, pr.size);
  if (pr.type == "float" || pr.type == "float32") {
    float f;
    uint32_t r32 = static_cast<uint32_t>(raw);
    std::memcpy(&f, &r32, 4);
    return f;
  }
  if (pr.type == "double" || pr.type == "float64") {
    double d;
    std::memcpy(&d, &raw, 8);
    return d;
  }
  if (ply_type_unsigned(pr.type)) return static_cast<double>(raw);
  // sign extend
  const int bits = pr.size * 8;
  int64_t s = static_cast<int64_t>(raw << (64 - bits)) >> (64 - bits);
  return static_cast<double>(s);
}

}  // namespace detail

inline CloudFormat format_for_path(const std::string& path) {
  auto dot = path.find_last_of('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == "csv") return CloudFormat::csv;
  return CloudFormat::ply_binary;
}

inline void save_cloud(const std::string& path, const PointCloud& c,
                       CloudFormat fmt) {
  c.validate();
  const bool grid = c.has_scan_grid(), lab = c.has_labels();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);

  if (fmt == CloudFormat::csv) {
    std::string head = "x,y,z,r,g,b";
    if (grid) head += ",scan_row,scan_col";
    if (lab) head += ",label";
    f << head << "\n";
    for (size_t i = 0; i < c.size(); ++i) {
      f << detail::fmt_double(c.pos[i].x) << ',' << detail::fmt_double(c.pos[i].y) << ','
        << detail::fmt_double(c.pos[i].z) << ',' << detail::fmt_double(c.color[i][0]) << ','
        << detail::fmt_double(c.color[i][1]) << ',' << detail::fmt_double(c.color[i][2]);
      if (grid) f << ',' << c.scan_row[i] << ',' << c.scan_col[i];
      if (lab) f << ',' << c.label[i];
      f << '\n';
    }
    if (!f) throw IoError("write failed: " + path);
    return;
  }

  const bool binary = fmt == CloudFormat::ply_binary;
  f << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
  f << "element vertex " << c.size() << "\n";
  for (const char* n : {"x", "y", "z", "red", "green", "blue"})
    f << "property double " << n << "\n";
  if (grid) f << "property uint scan_row\nproperty uint scan_col\n";
  if (lab) f << "property ushort label\n";
  f << "end_header\n";

  if (binary) {
    std::string buf;
    buf.reserve(c.size() * 64);
    for (size_t i = 0; i < c.size(); ++i) {
      detail::put_f64(buf, c.pos[i].x);
      detail::put_f64(buf, c.pos[i].y);
      detail::put_f64(buf, c.pos[i].z);
      for (double ch : c.color[i]) detail::put_f64(buf, ch);
      if (grid) {
        detail::put_u32(buf, c.scan_row[i]);
        detail::put_u32(buf, c.scan_col[i]);
      }
      if (lab) detail::put_u16(buf, c.label[i]);
    }
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  } else {
    for (size_t i = 0; i < c.size(); ++i) {
      f << detail::fmt_double(c.pos[i].x) << ' ' << detail::fmt_double(c.pos[i].y) << ' '
        << detail::fmt_double(c.pos[i].z) << ' ' << detail::fmt_double(c.color[i][0]) << ' '
        << detail::fmt_double(c.color[i][1]) << ' ' << detail::fmt_double(c.color[i][2]);
      if (grid) f << ' ' << c.scan_row[i] << ' ' << c.scan_col[i];
      if (lab) f << ' ' << c.label[i];
      f << '\n';
    }
  }
  if (!f) throw IoError("write failed: " + path);
}

inline void save_cloud(const std::string& path, const PointCloud& c) {
  save_cloud(path, c, format_for_path(path));
}

namespace detail {

inline PointCloud load_ply(std::ifstream& f, const std::string& path) {
  std::string line;
  int line_no = 1;  // "ply" already consumed
  bool binary = false, seen_format = false;
  size_t vertex_count = 0;
  std::vector<PlyProp> props;
  bool in_vertex = false, have_vertex = false;

  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    auto ctx = [&] { return path + ":" + std::to_string(line_no); };
    if (tok == "comment" || tok.empty()) continue;
    if (tok == "format") {
      std::string kind, ver;
      ls >> kind >> ver;
      if (kind == "binary_little_endian") binary = true;
      else if (kind == "ascii") binary = false;
      else throw ParseError("unsupported ply format '" + kind + "' at " + ctx());
      seen_format = true;
    } else if (tok == "element") {
      std::string name;
      size_t count = 0;
      ls >> name >> count;
      if (name == "vertex") {
        vertex_count = count;
        in_vertex = true;
        have_vertex = true;
      } else if (count != 0) {
        throw ParseError("unsupported element '" + name + "' at " + ctx());
      } else {
        in_vertex = false;
      }
    } else if (tok == "property") {
      if (!in_vertex) continue;
      PlyProp p;
      ls >> p.type >> p.name;
      if (p.type == "list") throw ParseError("list property unsupported at " + ctx());
      p.size = ply_type_size(p.type);
      if (p.size == 0) throw ParseError("unknown property type '" + p.type + "' at " + ctx());
      props.push_back(p);
    } else if (tok == "end_header") {
      break;
    } else {
      throw ParseError("unexpected header token '" + tok + "' at " + ctx());
    }
  }
  if (!seen_format || !have_vertex)
    throw ParseError("incomplete ply header in " + path);

  auto find = [&](std::initializer_list<const char*> names) {
    for (const char* n : names)
      for (size_t i = 0; i < props.size(); ++i)
        if (props[i].name == n) return static_cast<int>(i);
    return -1;
  };
  const int ix = find({"x"}), iy = find({"y"}), iz = find({"z"});
  if (ix < 0 || iy < 0 || iz < 0) throw ParseError("ply lacks x/y/z in " + path);
  const int ir = find({"red", "r"}), ig = find({"green", "g"}), ib = find({"blue", "b"});
  const int irow = find({"scan_row"}), icol = find({"scan_col"});
  const int ilab = find({"label", "class"});

  auto color_scale = [&](int idx) {
    return (idx >= 0 && ply_type_size(props[idx].type) <= 2 &&
            props[idx].type != "float" && props[idx].type != "double")
               ? 1.0 / 255.0
               : 1.0;
  };

  PointCloud c;
  c.pos.resize(vertex_count);
  c.color.assign(vertex_count, {0, 0, 0});
  if (irow >= 0 && icol >= 0) {
    c.scan_row.resize(vertex_count);
    c.scan_col.resize(vertex_count);
  } else if (irow >= 0 || icol >= 0) {
    throw ValidationError("scan_row/scan_col must be paired in " + path);
  }
  if (ilab >= 0) c.label.resize(vertex_count);

  std::vector<double> row(props.size());
  if (binary) {
    size_t stride = 0;
    for (const auto& p : props) stride += p.size;
    std::vector<unsigned char> buf(stride * vertex_count);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<size_t>(f.gcount()) != buf.size())
      throw ParseError("truncated ply payload at byte offset " +
                       std::to_string(f.gcount()) + " in " + path);
    const unsigned char* p = buf.data();
    for (size_t i = 0; i < vertex_count; ++i) {
      size_t off = 0;
      for (size_t j = 0; j < props.size(); ++j) {
        row[j] = decode_prop(p + off, props[j]);
        off += props[j].size;
      }
      p += stride;
      c.pos[i] = {row[ix], row[iy], row[iz]};
      if (ir >= 0 && ig >= 0 && ib >= 0)
        c.color[i] = {row[ir] * color_scale(ir), row[ig] * color_scale(ig),
                      row[ib] * color_scale(ib)};
      if (irow >= 0) {
        c.scan_row[i] = static_cast<uint32_t>(row[irow]);
        c.scan_col[i] = static_cast<uint32_t>(row[icol]);
      }
      if (ilab >= 0) c.label[i] = static_cast<uint16_t>(row[ilab]);
    }
  } else {
    for (size_t i = 0; i < vertex_count; ++i) {
      ++line_no;
      for (size_t j = 0; j < props.size(); ++j)
        if (!(f >> row[j]))
          throw ParseError("truncated ascii ply at " + path + ":" + std::to_string(line_no));
      c.pos[i] = {row[ix], row[iy], row[iz]};
      if (ir >= 0 && ig >= 0 && ib >= 0)
        c.color[i] = {row[ir] * color_scale(ir), row[ig] * color_scale(ig),
                      row[ib] * color_scale(ib)};
      if (irow >= 0) {
        c.scan_row[i] = static_cast<uint32_t>(row[irow]);
        c.scan_col[i] = static_cast<uint32_t>(row[icol]);
      }
      if (ilab >= 0) c.label[i] = static_cast<uint16_t>(row[ilab]);
    }
  }
  c.validate();
  return c;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline PointCloud load_csv(std::ifstream& f, const std::string& path) {
  std::string line;
  if (!std::getline(f, line)) throw ParseError("empty csv: " + path);
  auto names = split_csv(line);
  auto col = [&](const std::string& n) {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == n) return static_cast<int>(i);
    return -1;
  };
  const int ix = col("x"), iy = col("y"), iz = col("z");
  const int ir = col("r"), ig = col("g"), ib = col("b");
  const int irow = col("scan_row"), icol = col("scan_col"), ilab = col("label");
  if (ix < 0 || iy < 0 || iz < 0) throw ParseError("csv lacks x/y/z header at " + path + ":1");

  PointCloud c;
  int line_no = 1;
  int n_grid = 0, n_lab = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    auto cells = split_csv(line);
    auto ctx = [&] { return path + ":" + std::to_string(line_no); };
    if (cells.size() != names.size())
      throw ParseError("expected " + std::to_string(names.size()) + " cells at " + ctx());
    auto num = [&](int i) {
      const std::string& s = cells[i];
      if (s.empty()) throw ParseError("empty required cell at " + ctx());
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (end != s.c_str() + s.size()) throw ParseError("bad number '" + s + "' at " + ctx());
      return v;
    };
    c.pos.push_back({num(ix), num(iy), num(iz)});
    if (ir >= 0 && ig >= 0 && ib >= 0)
      c.color.push_back({num(ir), num(ig), num(ib)});
    else
      c.color.push_back({0, 0, 0});
    const bool row_here = irow >= 0 && !cells[irow].empty();
    const bool col_here = icol >= 0 && !cells[icol].empty();
    if (row_here != col_here) throw ValidationError("scan_row/scan_col must be paired at " + ctx());
    if (row_here) {
      c.scan_row.push_back(static_cast<uint32_t>(num(irow)));
      c.scan_col.push_back(static_cast<uint32_t>(num(icol)));
      ++n_grid;
    }
    if (ilab >= 0 && !cells[ilab].empty()) {
      c.label.push_back(static_cast<uint16_t>(num(ilab)));
      ++n_lab;
    }
  }
  const int n = static_cast<int>(c.size());
  if (n_grid != 0 && n_grid != n)
    throw ValidationError("scan grid present on " + std::to_string(n_grid) + " of " +
                          std::to_string(n) + " rows in " + path);
  if (n_lab != 0 && n_lab != n)
    throw ValidationError("label present on " + std::to_string(n_lab) + " of " +
                          std::to_string(n) + " rows in " + path);
  c.validate();
  return c;
}

}  // namespace detail

inline PointCloud load_cloud(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::string magic;
  if (!std::getline(f, magic)) throw ParseError("empty file: " + path);
  if (!magic.empty() && magic.back() == '\r') magic.pop_back();
  if (magic == "ply") return detail::load_ply(f, path);
  // not a ply: treat as csv (re-open to recover the first line)
  f.clear();
  f.seekg(0);
  return detail::load_csv(f, path);
}

// Writes a viewer-friendly PLY (8-bit colors from palette[prediction]).
inline void export_colored(const std::string& path, const PointCloud& c,
                           const std::vector<int>& predictions,
                           const std::vector<std::array<uint8_t, 3>>& palette) {
  if (predictions.size() != c.size())
    throw ValidationError("prediction count != point count");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f << "ply\nformat binary_little_endian 1.0\nelement vertex " << c.size() << "\n";
  for (const char* n : {"x", "y", "z"}) f << "property double " << n << "\n";
  for (const char* n : {"red", "green", "blue"}) f << "property uchar " << n << "\n";
  f << "property ushort label\nend_header\n";
  std::string buf;
  for (size_t i = 0; i < c.size(); ++i) {
    const int k = predictions[i];
    if (k < 0 || static_cast<size_t>(k) >= palette.size())
      throw ValidationError("prediction outside palette");
    detail::put_f64(buf, c.pos[i].x);
    detail::put_f64(buf, c.pos[i].y);
    detail::put_f64(buf, c.pos[i].z);
    for (uint8_t ch : palette[k]) buf.push_back(static_cast<char>(ch));
    detail::put_u16(buf, static_cast<uint16_t>(k));
  }
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace hdv
