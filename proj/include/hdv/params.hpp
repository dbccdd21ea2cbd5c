#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hdv/error.hpp"
#include "hdv/rng.hpp"
#include "hdv/tensor.hpp"

// Named parameter tensors with lock flags, the Adam optimizer, and the binary
// checkpoint format (see docs/formats.md for the byte layout).

namespace hdv {

struct ParamTensor {
  std::string name;
  Mat value, grad;
  Mat m, v;  // Adam moments, lazily sized
  bool locked = false;
};

class ParamStore {
 public:
  // Binds the named tensor, creating it with uniform(-1/sqrt(fan_in), ..)
  // entries when absent. fan_in <= 0 requests zero initialization.
  ParamTensor& create(const std::string& name, int rows, int cols, int fan_in, Rng& rng) {
    auto it = byname_.find(name);
    if (it != byname_.end()) {
      ParamTensor& p = *list_[it->second];
      if (p.value.rows != rows || p.value.cols != cols)
        throw ShapeError("parameter " + name + " bound with mismatched shape");
      return p;
    }
    auto p = std::make_unique<ParamTensor>();
    p->name = name;
    p->value = Mat(rows, cols);
    p->grad = Mat(rows, cols);
    if (fan_in > 0) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& x : p->value.a) x = rng.uniform(-bound, bound);
    }
    byname_[name] = static_cast<int>(list_.size());
    list_.push_back(std::move(p));
    return *list_.back();
  }

  ParamTensor& constant(const std::string& name, int rows, int cols, double fill, Rng& rng) {
    const bool fresh = byname_.find(name) == byname_.end();
    ParamTensor& p = create(name, rows, cols, 0, rng);
    if (fresh)
      for (double& x : p.value.a) x = fill;
    return p;
  }

  bool has(const std::string& name) const { return byname_.count(name) > 0; }

  ParamTensor& get(const std::string& name) {
    auto it = byname_.find(name);
    if (it == byname_.end()) throw ContractError("unknown parameter " + name);
    return *list_[it->second];
  }

  size_t size() const { return list_.size(); }
  ParamTensor& at(size_t i) { return *list_[i]; }
  const ParamTensor& at(size_t i) const { return *list_[i]; }

  long long scalar_count() const {
    long long n = 0;
    for (const auto& p : list_) n += static_cast<long long>(p->value.count());
    return n;
  }

  void zero_grads() {
    for (auto& p : list_)
      for (double& g : p->grad.a) g = 0;
  }

  void set_locked(const std::string& prefix, bool locked) {
    for (auto& p : list_)
      if (p->name.rfind(prefix, 0) == 0) p->locked = locked;
  }

  void lock_all(bool locked) {
    for (auto& p : list_) p->locked = locked;
  }

 private:
  std::vector<std::unique_ptr<ParamTensor>> list_;
  std::map<std::string, int> byname_;
};

// Binds a parameter into a graph as a leaf; locked parameters become plain
// constants so no gradient work happens behind them.
inline Var bind(Graph& g, const ParamTensor& p) { return g.leaf(p.value, !p.locked); }

// Pull the graph's gradient for a bound parameter into its accumulator.
inline void pull_grad(Graph& g, Var v, ParamTensor& p, double scale = 1.0) {
  if (p.locked) return;
  const Mat& gm = g.grad(v);
  if (!gm.same_shape(p.grad)) return;  // graph never reached backward
  for (size_t i = 0; i < gm.count(); ++i) p.grad.a[i] += scale * gm.a[i];
}

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One update from the accumulated grads; leaves locked tensors untouched.
  void step(ParamStore& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < store.size(); ++i) {
      ParamTensor& p = store.at(i);
      if (p.locked) continue;
      if (!p.m.same_shape(p.value)) {
        p.m = Mat(p.value.rows, p.value.cols);
        p.v = Mat(p.value.rows, p.value.cols);
      }
      for (size_t j = 0; j < p.value.count(); ++j) {
        const double g = p.grad.a[j];
        p.m.a[j] = cfg_.beta1 * p.m.a[j] + (1 - cfg_.beta1) * g;
        p.v.a[j] = cfg_.beta2 * p.v.a[j] + (1 - cfg_.beta2) * g * g;
        const double mh = p.m.a[j] / c1;
        const double vh = p.v.a[j] / c2;
        p.value.a[j] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
    }
  }

  int64_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// Checkpoint: magic+version, a metadata string (JSON), then each tensor as
// name, lock flag, shape, and row-major f64 payload, all little-endian.
namespace ckpt {

inline constexpr char kMagic[8] = {'H', 'D', 'V', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kVersion = 1;

inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline uint64_t read_le(std::istream& f, int n) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), n);
  if (!f) throw ParseError("truncated checkpoint");
  uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace ckpt

inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const std::string& meta) {
  std::string out;
  out.append(ckpt::kMagic, 8);
  ckpt::put_u32(out, ckpt::kVersion);
  ckpt::put_u32(out, static_cast<uint32_t>(meta.size()));
  out += meta;
  ckpt::put_u32(out, static_cast<uint32_t>(store.size()));
  for (size_t i = 0; i < store.size(); ++i) {
    const ParamTensor& p = store.at(i);
    ckpt::put_u32(out, static_cast<uint32_t>(p.name.size()));
    out += p.name;
    out.push_back(p.locked ? 1 : 0);
    ckpt::put_u32(out, static_cast<uint32_t>(p.value.rows));
    ckpt::put_u32(out, static_cast<uint32_t>(p.value.cols));
    for (double d : p.value.a) {
      uint64_t bits;
      std::memcpy(&bits, &d, 8);
      ckpt::put_u64(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path);
}

// Returns the metadata string; tensors are created (or overwritten) in store.
inline std::string load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, ckpt::kMagic, 8) != 0)
    throw ParseError("not a checkpoint: " + path);
  const auto version = static_cast<uint32_t>(ckpt::read_le(f, 4));
  if (version != ckpt::kVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = static_cast<uint32_t>(ckpt::read_le(f, 4));
  std::string meta(meta_len, '\0');
  f.read(meta.data(), meta_len);
  const auto count = static_cast<uint32_t>(ckpt::read_le(f, 4));
  Rng dummy(0);
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = static_cast<uint32_t>(ckpt::read_le(f, 4));
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto locked = static_cast<uint8_t>(ckpt::read_le(f, 1));
    const auto rows = static_cast<int>(ckpt::read_le(f, 4));
    const auto cols = static_cast<int>(ckpt::read_le(f, 4));
    ParamTensor& p = store.create(name, rows, cols, 0, dummy);
    p.locked = locked != 0;
    for (double& d : p.value.a) {
      const uint64_t bits = ckpt::read_le(f, 8);
      std::memcpy(&d, &bits, 8);
    }
  }
  if (!f) throw ParseError("truncated checkpoint: " + path);
  return meta;
}

}  // namespace hdv
