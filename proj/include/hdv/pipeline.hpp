#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hdv/density.hpp"
#include "hdv/error.hpp"
#include "hdv/model.hpp"
#include "hdv/rng.hpp"
#include "hdv/train.hpp"

// Glue shared by the CLI subcommands: config files with flag overrides,
// config hashing for artifact stamps, sidecar formats, and atomic writes so
// failed runs leave no partial outputs behind.

namespace hdv {

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[i] = digits[v & 0xf];
  return out;
}

inline nlohmann::json model_to_json(const HdvConfig& c) {
  return nlohmann::json{{"counts", c.counts},
                        {"e_widths", c.e_widths},
                        {"h_widths", c.h_widths},
                        {"k_neighbors", c.k_neighbors},
                        {"classes", c.classes},
                        {"pos_width", c.pos_width},
                        {"final_att_hidden", c.final_att_hidden},
                        {"final_hidden", c.final_hidden},
                        {"use_elfa", c.use_elfa},
                        {"pass_density_input", c.pass_density_input},
                        {"feature_allocation", c.feature_allocation},
                        {"allocation_limit", c.allocation_limit}};
}

inline void apply_model_json(HdvConfig& c, const nlohmann::json& j) {
  try {
    if (j.contains("counts")) c.counts = j.at("counts").get<std::vector<int>>();
    if (j.contains("e_widths")) c.e_widths = j.at("e_widths").get<std::vector<int>>();
    if (j.contains("h_widths")) c.h_widths = j.at("h_widths").get<std::vector<int>>();
    if (j.contains("k_neighbors")) c.k_neighbors = j.at("k_neighbors").get<int>();
    if (j.contains("classes")) c.classes = j.at("classes").get<int>();
    if (j.contains("pos_width")) c.pos_width = j.at("pos_width").get<int>();
    if (j.contains("final_att_hidden")) c.final_att_hidden = j.at("final_att_hidden").get<int>();
    if (j.contains("final_hidden")) c.final_hidden = j.at("final_hidden").get<int>();
    if (j.contains("use_elfa")) c.use_elfa = j.at("use_elfa").get<bool>();
    if (j.contains("pass_density_input"))
      c.pass_density_input = j.at("pass_density_input").get<bool>();
    if (j.contains("feature_allocation"))
      c.feature_allocation = j.at("feature_allocation").get<std::string>();
    if (j.contains("allocation_limit")) c.allocation_limit = j.at("allocation_limit").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
  return nlohmann::json{{"epochs", c.epochs},
                        {"batches_per_epoch", c.batches_per_epoch},
                        {"batch_size", c.batch_size},
                        {"lr", c.lr},
                        {"lr_decay", c.lr_decay},
                        {"seed", c.seed},
                        {"weights_mode", c.weights_mode}};
}

inline void apply_train_json(TrainConfig& c, const nlohmann::json& j) {
  try {
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batches_per_epoch"))
      c.batches_per_epoch = j.at("batches_per_epoch").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("lr_decay")) c.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("weights_mode")) c.weights_mode = j.at("weights_mode").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
}

struct PipelineConfig {
  uint64_t seed = 1;
  std::string data_dir;
  HdvConfig model;
  TrainConfig train;
  std::vector<std::string> class_names{"wall", "ground", "other"};
};

inline nlohmann::json pipeline_to_json(const PipelineConfig& c) {
  return nlohmann::json{{"seed", c.seed},
                        {"data_dir", c.data_dir},
                        {"model", model_to_json(c.model)},
                        {"train", train_to_json(c.train)},
                        {"class_names", c.class_names}};
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  PipelineConfig c;
  if (const char* env = std::getenv("HDV_DATA_DIR")) c.data_dir = env;
  if (path.empty()) return c;
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("class_names"))
      c.class_names = j.at("class_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (j.contains("model")) apply_model_json(c.model, j.at("model"));
  if (j.contains("train")) apply_train_json(c.train, j.at("train"));
  return c;
}

inline uint64_t config_hash(const PipelineConfig& c) { return fnv1a64(pipeline_to_json(c).dump()); }

// Resolve a possibly relative path against the configured data directory.
inline std::string resolve_path(const PipelineConfig& c, const std::string& p) {
  if (p.empty() || c.data_dir.empty()) return p;
  std::filesystem::path fp(p);
  if (fp.is_absolute()) return p;
  return (std::filesystem::path(c.data_dir) / fp).string();
}

inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " into place: " + ec.message());
}

inline void save_thresholds(const std::string& path, const StateThresholds& st, uint64_t seed,
                            const std::string& cfg_hash) {
  nlohmann::json j{{"t", st.t},
                   {"k_used", st.k_used},
                   {"delta_max", st.delta_max},
                   {"rho_log10_mean", st.rho_log10_mean},
                   {"rho_log10_std", st.rho_log10_std},
                   {"rng_version", kRngVersion},
                   {"seed", seed},
                   {"config_hash", cfg_hash}};
  write_file_atomic(path, j.dump(2) + "\n");
}

inline StateThresholds load_thresholds(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open thresholds " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  StateThresholds st;
  try {
    auto t = j.at("t").get<std::vector<double>>();
    if (t.size() != st.t.size()) throw ParseError(path + ": threshold array must have 6 entries");
    std::copy(t.begin(), t.end(), st.t.begin());
    st.k_used = j.at("k_used").get<int>();
    st.delta_max = j.at("delta_max").get<int>();
    st.rho_log10_mean = j.value("rho_log10_mean", 0.0);
    st.rho_log10_std = j.value("rho_log10_std", 1.0);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  st.validate();
  return st;
}

inline void save_labels(const std::string& path, const std::vector<uint16_t>& labels) {
  std::string out;
  out.reserve(labels.size() * 3);
  for (uint16_t l : labels) {
    out += std::to_string(l);
    out += '\n';
  }
  write_file_atomic(path, out);
}

inline std::vector<uint16_t> load_labels(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open labels " + path);
  std::vector<uint16_t> out;
  std::string line;
  size_t ln = 0;
  while (std::getline(f, line)) {
    ++ln;
    if (line.empty()) continue;
    char* end = nullptr;
    const unsigned long v = std::strtoul(line.c_str(), &end, 10);
    if (end == line.c_str() || v > 0xffff)
      throw ParseError(path + ":" + std::to_string(ln) + ": bad label");
    out.push_back(static_cast<uint16_t>(v));
  }
  return out;
}

inline std::string make_checkpoint_meta(const std::string& stage, const PipelineConfig& c) {
  nlohmann::json j{{"stage", stage},
                   {"config", pipeline_to_json(c)},
                   {"config_hash", hex64(config_hash(c))},
                   {"rng_version", kRngVersion}};
  return j.dump();
}

struct CheckpointMeta {
  std::string stage;
  nlohmann::json config;
};

inline CheckpointMeta parse_checkpoint_meta(const std::string& meta) {
  CheckpointMeta m;
  if (meta.empty()) return m;
  try {
    auto j = nlohmann::json::parse(meta);
    m.stage = j.value("stage", "");
    if (j.contains("config")) m.config = j.at("config");
  } catch (const nlohmann::json::exception&) {
    // tolerate foreign metadata; stage stays unknown
  }
  return m;
}

}  // namespace hdv
