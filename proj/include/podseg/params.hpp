#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "podseg/tensor.hpp"

namespace podseg {

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  // Buffers (batch-norm running statistics, optimizer counters) are stored and
  // checkpointed like parameters but never receive gradients.
  bool trainable = true;
};

// Named parameter set. Names are dot-separated paths ("pst.dvfe.vfe1.fc.weight");
// std::map keeps iteration (and therefore checkpoint layout) sorted by name.
template <typename T>
class ModelParams {
 public:
  explicit ModelParams(std::uint64_t seed = 0) : rng_seed_(seed), rng_(seed) {}

  std::uint64_t rng_seed() const { return rng_seed_; }
  std::mt19937_64& rng() { return rng_; }

  Param<T>& add(const std::string& name, std::vector<std::size_t> shape, T fill = T(0),
                bool trainable = true) {
    if (entries_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    Param<T> p;
    p.value = Tensor<T>(shape, fill);
    p.grad = Tensor<T>(shape, T(0));
    p.trainable = trainable;
    return entries_.emplace(name, std::move(p)).first->second;
  }

  Param<T>& add_uniform(const std::string& name, std::vector<std::size_t> shape, T bound) {
    auto& p = add(name, std::move(shape));
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
    for (auto& v : p.value.storage()) v = static_cast<T>(dist(rng_));
    return p;
  }

  // Weight [in x out] with U(-1/sqrt(in), 1/sqrt(in)) and zero bias.
  void add_dense(const std::string& prefix, std::size_t in, std::size_t out) {
    add_uniform(prefix + ".weight", {in, out}, static_cast<T>(1.0 / std::sqrt(static_cast<double>(in))));
    add(prefix + ".bias", {1, out});
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Param<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  const Param<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& [_, p] : entries_) p.grad.fill(T(0));
  }

  // Parameters under a frozen prefix are excluded from the backward pass.
  void set_frozen(const std::string& prefix, bool frozen) {
    std::erase(frozen_, prefix);
    if (frozen) frozen_.push_back(prefix);
  }
  bool is_frozen(std::string_view name) const {
    for (const auto& f : frozen_)
      if (name.substr(0, f.size()) == f) return true;
    return false;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_)
      if (p.trainable) n += p.value.size();
    return n;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out(rng_seed_);
    for (const auto& [name, p] : entries_) {
      auto& q = out.add(name, p.value.shape(), U(0), p.trainable);
      q.value = p.value.template cast<U>();
    }
    return out;
  }

 private:
  std::map<std::string, Param<T>> entries_;
  std::vector<std::string> frozen_;
  std::uint64_t rng_seed_;
  std::mt19937_64 rng_;
};

template <typename T>
bool all_finite(const ModelParams<T>& params, std::string* bad = nullptr) {
  for (const auto& [name, p] : params)
    for (T v : p.value.values())
      if (!std::isfinite(static_cast<double>(v))) {
        if (bad) *bad = name;
        return false;
      }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoint file: "PSTCKPT1", then per tensor
//   u32 name_len, name bytes (UTF-8), u32 rank, u32 dims[rank], f32 values[]
// all little-endian. Tensors are read until end of file.

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kCheckpointMagic = "PSTCKPT1";

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  for (const auto& t : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.value.values()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw CheckpointError("write failed: " + path);
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::string_view(magic, 8) != kCheckpointMagic)
    throw CheckpointError("bad checkpoint magic in " + path);
  std::vector<NamedTensor> out;
  std::uint32_t name_len = 0;
  while (detail::get_u32(is, name_len)) {
    NamedTensor t;
    t.name.resize(name_len);
    std::uint32_t rank = 0;
    if (!is.read(t.name.data(), name_len) || !detail::get_u32(is, rank))
      throw CheckpointError("truncated checkpoint header in " + path);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!detail::get_u32(is, v)) throw CheckpointError("truncated checkpoint dims in " + path);
      d = v;
    }
    t.value = Tensor<float>(shape);
    for (auto& v : t.value.storage()) {
      std::uint32_t bits = 0;
      if (!detail::get_u32(is, bits)) throw CheckpointError("truncated tensor '" + t.name + "' in " + path);
      v = std::bit_cast<float>(bits);
    }
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
std::vector<NamedTensor> to_named(const ModelParams<T>& params, const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  for (const auto& [name, p] : params) out.push_back({prefix + name, p.value.template cast<float>()});
  return out;
}

// Copies every tensor of `tensors` whose name (after stripping `prefix`) exists
// in `params`. With `strict`, missing or mis-shaped entries are errors.
template <typename T>
void load_named(ModelParams<T>& params, const std::vector<NamedTensor>& tensors, bool strict = true,
                const std::string& prefix = "") {
  std::size_t matched = 0;
  for (const auto& t : tensors) {
    if (t.name.compare(0, prefix.size(), prefix) != 0) continue;
    const std::string name = t.name.substr(prefix.size());
    if (!params.contains(name)) {
      if (strict) throw CheckpointError("checkpoint tensor '" + name + "' not in model");
      continue;
    }
    auto& p = params.at(name);
    if (p.value.shape() != t.value.shape())
      throw CheckpointError("shape mismatch for '" + name + "': model " + shape_string(p.value.shape()) +
                            " vs checkpoint " + shape_string(t.value.shape()));
    p.value = t.value.template cast<T>();
    ++matched;
  }
  if (strict && matched != params.size())
    throw CheckpointError("checkpoint provides " + std::to_string(matched) + " of " +
                          std::to_string(params.size()) + " model tensors");
}

}  // namespace podseg
