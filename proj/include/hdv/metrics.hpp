#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "hdv/density.hpp"
#include "hdv/error.hpp"

// Segmentation metrics with the per-density-state reporting protocol: one
// column per inherent state plus a joint "All" column computed over every
// point at once rather than averaging the per-state columns.

namespace hdv {

struct MiouRow {
  std::vector<double> iou;       // NaN where the class is absent from the slice
  std::vector<uint8_t> present;  // class occurs in labels or predictions within the mask
  double miou = 0.0;
  int64_t count = 0;
};

inline MiouRow miou(const std::vector<uint16_t>& pred, const std::vector<uint16_t>& label,
                    int classes, const std::vector<uint8_t>* mask = nullptr) {
  if (pred.size() != label.size()) throw ContractError("prediction/label length mismatch");
  if (mask && mask->size() != pred.size()) throw ContractError("mask length mismatch");
  std::vector<int64_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  MiouRow row;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    ++row.count;
    const int p = pred[i], l = label[i];
    if (p >= classes || l >= classes) throw ValidationError("class id out of range");
    if (p == l)
      ++tp[l];
    else {
      ++fp[p];
      ++fn[l];
    }
  }
  if (row.count == 0) throw EmptySlice("no points under the metric mask");
  row.iou.assign(classes, std::numeric_limits<double>::quiet_NaN());
  row.present.assign(classes, 0);
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    const int64_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    row.present[c] = 1;
    row.iou[c] = static_cast<double>(tp[c]) / static_cast<double>(denom);
    sum += row.iou[c];
    ++present;
  }
  row.miou = sum / present;  // present >= 1 whenever count >= 1
  return row;
}

struct DensityReport {
  int classes = 0;
  MiouRow all;
  std::vector<int64_t> slice_count;   // d = 0..5
  std::vector<double> proportion;     // percent of points per slice
  std::vector<MiouRow> slice;
  std::vector<uint8_t> slice_valid;   // 0 where the slice is empty (n/a)
};

inline DensityReport per_density_report(const std::vector<uint16_t>& pred,
                                        const std::vector<uint16_t>& label,
                                        const std::vector<int>& states, int classes) {
  if (states.size() != pred.size()) throw ContractError("state/prediction length mismatch");
  DensityReport rep;
  rep.classes = classes;
  rep.all = miou(pred, label, classes);
  rep.slice_count.assign(kNumStates + 1, 0);
  for (int s : states) {
    if (s < 0 || s > kNumStates) throw ValidationError("state out of range");
    ++rep.slice_count[s];
  }
  for (int d = 0; d <= kNumStates; ++d) {
    rep.proportion.push_back(100.0 * static_cast<double>(rep.slice_count[d]) /
                             static_cast<double>(pred.size()));
    std::vector<uint8_t> mask(pred.size());
    for (size_t i = 0; i < pred.size(); ++i) mask[i] = states[i] == d ? 1 : 0;
    if (rep.slice_count[d] == 0) {
      rep.slice.push_back(MiouRow{});
      rep.slice_valid.push_back(0);
    } else {
      rep.slice.push_back(miou(pred, label, classes, &mask));
      rep.slice_valid.push_back(1);
    }
  }
  return rep;
}

namespace detail {

inline std::string metric_cell(double v, bool valid) {
  if (!valid || std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

inline std::string percent_cell(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

// Columns: All, then one per density state; rows: share of points, MIoU,
// then per-class IoU. Values in percent.
inline std::string report_csv(const DensityReport& rep,
                              const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out << "row,All";
  for (int d = 0; d <= kNumStates; ++d) out << ",I(" << d << ")";
  out << "\n";
  out << "points_pct," << detail::percent_cell(100.0);
  for (int d = 0; d <= kNumStates; ++d) out << "," << detail::percent_cell(rep.proportion[d]);
  out << "\n";
  out << "miou," << detail::metric_cell(rep.all.miou, true);
  for (int d = 0; d <= kNumStates; ++d)
    out << "," << detail::metric_cell(rep.slice[d].miou, rep.slice_valid[d]);
  out << "\n";
  for (int c = 0; c < rep.classes; ++c) {
    out << "iou_" << (c < static_cast<int>(class_names.size()) ? class_names[c]
                                                               : "class" + std::to_string(c));
    out << "," << detail::metric_cell(rep.all.iou[c], rep.all.present[c]);
    for (int d = 0; d <= kNumStates; ++d)
      out << "," << detail::metric_cell(rep.slice[d].iou[c],
                                        rep.slice_valid[d] && rep.slice[d].present[c]);
    out << "\n";
  }
  return out.str();
}

inline std::string report_markdown(const DensityReport& rep,
                                   const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out << "| metric | All |";
  for (int d = 0; d <= kNumStates; ++d) out << " I(" << d << ") |";
  out << "\n|---|---|";
  for (int d = 0; d <= kNumStates; ++d) out << "---|";
  out << "\n| points % | 100.00 |";
  for (int d = 0; d <= kNumStates; ++d) out << " " << detail::percent_cell(rep.proportion[d]) << " |";
  out << "\n| MIoU | " << detail::metric_cell(rep.all.miou, true) << " |";
  for (int d = 0; d <= kNumStates; ++d)
    out << " " << detail::metric_cell(rep.slice[d].miou, rep.slice_valid[d]) << " |";
  out << "\n";
  for (int c = 0; c < rep.classes; ++c) {
    out << "| IoU "
        << (c < static_cast<int>(class_names.size()) ? class_names[c]
                                                     : "class" + std::to_string(c))
        << " | " << detail::metric_cell(rep.all.iou[c], rep.all.present[c]) << " |";
    for (int d = 0; d <= kNumStates; ++d)
      out << " "
          << detail::metric_cell(rep.slice[d].iou[c],
                                 rep.slice_valid[d] && rep.slice[d].present[c])
          << " |";
    out << "\n";
  }
  return out.str();
}

}  // namespace hdv
