#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "podseg/cloud.hpp"
#include "podseg/layers.hpp"

namespace podseg {

struct WindowConfig {
  std::array<std::int32_t, 3> window_size{6, 6, 12};
  std::size_t num_blocks = 6;
  std::size_t channels = 60;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 120;
  int shift_sign = 1;  // +1: add half a window before flooring; -1: subtract it

  std::size_t volume() const {
    return static_cast<std::size_t>(window_size[0]) * static_cast<std::size_t>(window_size[1]) *
           static_cast<std::size_t>(window_size[2]);
  }

  void validate() const {
    for (auto s : window_size)
      if (s < 1) throw std::invalid_argument("window size must be >= 1 per axis");
    if (heads == 0 || channels % heads != 0) throw std::invalid_argument("channels must be divisible by heads");
    if (channels % 6 != 0) throw std::invalid_argument("channels must be divisible by 6 for the position encoding");
    if (shift_sign != 1 && shift_sign != -1) throw std::invalid_argument("shift_sign must be +1 or -1");
  }
};

using WindowCoord = std::array<std::int32_t, 3>;

// One window set over the occupied voxels of a map.
struct WindowPartition {
  std::vector<WindowCoord> window_coords;  // per window, ordered by (batch, z, y, x)
  Groups windows;                          // member voxel indices, ascending
  std::vector<std::int64_t> voxel_window;  // per voxel
  std::vector<VoxelCoord> voxel_offset;    // per voxel, position inside its window

  std::size_t num_windows() const { return windows.size(); }
  std::vector<std::size_t> valid_counts() const {
    std::vector<std::size_t> out;
    for (const auto& w : windows) out.push_back(w.size());
    return out;
  }
};

namespace detail {

inline std::int32_t floor_div(std::int64_t a, std::int32_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && (a < 0)) --q;
  return static_cast<std::int32_t>(q);
}

// `batch` tags voxels of independent clouds so they never share a window.
inline WindowPartition make_partition(const std::vector<VoxelCoord>& coords, const std::vector<std::int32_t>& batch,
                                      const WindowConfig& cfg, bool shifted) {
  WindowPartition p;
  const std::size_t n = coords.size();
  p.voxel_window.assign(n, -1);
  p.voxel_offset.resize(n);
  std::vector<std::tuple<std::int32_t, std::int32_t, std::int32_t, std::int32_t, std::size_t>> keyed(n);
  std::vector<WindowCoord> wc(n);
  for (std::size_t v = 0; v < n; ++v) {
    for (int a = 0; a < 3; ++a) {
      const std::int32_t size = cfg.window_size[a];
      const std::int64_t shift = shifted ? cfg.shift_sign * (size / 2) : 0;
      const std::int64_t c = static_cast<std::int64_t>(coords[v][a]) + shift;
      wc[v][a] = floor_div(c, size);
      p.voxel_offset[v][a] = static_cast<std::int32_t>(c - static_cast<std::int64_t>(wc[v][a]) * size);
    }
    keyed[v] = {batch.empty() ? 0 : batch[v], wc[v][2], wc[v][1], wc[v][0], v};
  }
  std::sort(keyed.begin(), keyed.end());
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t v = std::get<4>(keyed[k]);
    const bool fresh = k == 0 || std::get<0>(keyed[k]) != std::get<0>(keyed[k - 1]) ||
                       std::get<1>(keyed[k]) != std::get<1>(keyed[k - 1]) ||
                       std::get<2>(keyed[k]) != std::get<2>(keyed[k - 1]) ||
                       std::get<3>(keyed[k]) != std::get<3>(keyed[k - 1]);
    if (fresh) {
      p.window_coords.push_back(wc[v]);
      p.windows.emplace_back();
    }
    p.windows.back().push_back(static_cast<std::int64_t>(v));
    p.voxel_window[v] = static_cast<std::int64_t>(p.windows.size() - 1);
  }
  return p;
}

}  // namespace detail

// Set 1: window = floor(v / size), offset = v mod size.
inline WindowPartition partition_windows(const VoxelMap& vmap, const WindowConfig& cfg,
                                         const std::vector<std::int32_t>& batch = {}) {
  return detail::make_partition(vmap.voxel_coords, batch, cfg, false);
}

// Set 2: the same grid moved by half a window.
inline WindowPartition shift_windows(const VoxelMap& vmap, const WindowConfig& cfg,
                                     const std::vector<std::int32_t>& batch = {}) {
  return detail::make_partition(vmap.voxel_coords, batch, cfg, true);
}

// ---- sub-batches --------------------------------------------------------------

enum class Phase { training, inference };

struct SubBatchSpec {
  Phase phase = Phase::inference;
  std::vector<double> edges;  // upper bound of each bucket, fraction of N_V^W
  std::vector<double> pads;   // padded size of each bucket, fraction of N_V^W

  static SubBatchSpec training() { return {Phase::training, {0.25, 0.5, 1.0}, {0.25, 0.5, 0.9}}; }
  static SubBatchSpec inference() { return {Phase::inference, {0.25, 0.5, 0.9, 1.0}, {0.25, 0.5, 0.9, 1.0}}; }
  static SubBatchSpec for_phase(Phase p) { return p == Phase::training ? training() : inference(); }

  // Fractional sizes round up; the small slack absorbs products like 0.25 * 432.
  static std::size_t count(double frac, std::size_t nvw) {
    return static_cast<std::size_t>(std::ceil(frac * static_cast<double>(nvw) - 1e-9));
  }
  std::size_t edge(std::size_t i, std::size_t nvw) const { return count(edges[i], nvw); }
  std::size_t pad(std::size_t i, std::size_t nvw) const { return count(pads[i], nvw); }

  std::size_t bucket_of(std::size_t valid, std::size_t nvw) const {
    for (std::size_t i = 0; i < edges.size(); ++i)
      if (valid <= edge(i, nvw)) return i;
    throw std::invalid_argument("window holds more voxels than N_V^W");
  }
};

struct Bucket {
  std::size_t pad = 0;
  Groups windows;                        // pad slots each; -1 marks padding
  std::vector<std::size_t> window_ids;  // into the partition
};

struct SubBatches {
  std::vector<Bucket> buckets;
  std::vector<std::uint8_t> active;  // per voxel: 0 when downsampled out of its window
  std::size_t dropped = 0;

  std::shared_ptr<const Groups> flat() const {
    auto all = std::make_shared<Groups>();
    for (const auto& b : buckets) all->insert(all->end(), b.windows.begin(), b.windows.end());
    return all;
  }
};

// Places every window of the partition in its bucket and pads it. In the
// training phase windows above the last pad size keep a uniform random subset
// of that size drawn from `seed`.
inline SubBatches assign_subbatches(const WindowPartition& part, const SubBatchSpec& spec, std::size_t nvw,
                                    std::uint64_t seed = 0) {
  if (spec.edges.size() != spec.pads.size() || spec.edges.empty())
    throw std::invalid_argument("sub-batch spec needs one pad per edge");
  SubBatches sb;
  sb.buckets.resize(spec.edges.size());
  for (std::size_t i = 0; i < sb.buckets.size(); ++i) sb.buckets[i].pad = spec.pad(i, nvw);
  sb.active.assign(part.voxel_window.size(), 1);
  std::mt19937_64 rng(seed);
  for (std::size_t w = 0; w < part.num_windows(); ++w) {
    IndexList members = part.windows[w];
    auto& bucket = sb.buckets[spec.bucket_of(members.size(), nvw)];
    if (members.size() > bucket.pad) {
      if (spec.phase != Phase::training)
        throw std::logic_error("inference sub-batch smaller than its window");
      for (std::size_t i = 0; i < bucket.pad; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, members.size() - 1);
        std::swap(members[i], members[pick(rng)]);
      }
      for (std::size_t i = bucket.pad; i < members.size(); ++i) sb.active[static_cast<std::size_t>(members[i])] = 0;
      sb.dropped += members.size() - bucket.pad;
      members.resize(bucket.pad);
      std::sort(members.begin(), members.end());
    }
    members.resize(bucket.pad, -1);
    bucket.windows.push_back(std::move(members));
    bucket.window_ids.push_back(w);
  }
  return sb;
}

// ---- position encoding --------------------------------------------------------

// Fixed sinusoidal encoding of in-window offsets. Channels split evenly over
// x, y, z; within an axis, channel 2k is sin and 2k+1 is cos of
// (offset / size * 2pi) / 10000^(2k / per_axis).
template <typename T>
Tensor<T> position_encoding(const std::vector<VoxelCoord>& offsets, const WindowConfig& cfg, std::size_t channels) {
  if (channels % 6 != 0) throw std::invalid_argument("position encoding needs channels divisible by 6");
  const std::size_t per_axis = channels / 3;
  // Lookup per axis and offset value.
  std::array<std::vector<T>, 3> table;
  for (int a = 0; a < 3; ++a) {
    const auto size = static_cast<std::size_t>(cfg.window_size[a]);
    table[a].resize(size * per_axis);
    for (std::size_t o = 0; o < size; ++o) {
      const double x = static_cast<double>(o) / static_cast<double>(size) * 2.0 * std::numbers::pi;
      for (std::size_t k = 0; k < per_axis / 2; ++k) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(per_axis));
        table[a][o * per_axis + 2 * k] = static_cast<T>(std::sin(x * freq));
        table[a][o * per_axis + 2 * k + 1] = static_cast<T>(std::cos(x * freq));
      }
    }
  }
  Tensor<T> out(offsets.size(), channels);
  for (std::size_t i = 0; i < offsets.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      const auto o = offsets[i][a];
      if (o < 0 || o >= cfg.window_size[a]) throw std::out_of_range("offset outside its window");
      std::copy_n(table[a].data() + static_cast<std::size_t>(o) * per_axis, per_axis,
                  out.data() + i * channels + static_cast<std::size_t>(a) * per_axis);
    }
  return out;
}

// ---- blocks ---------------------------------------------------------------------

template <typename T>
void init_window_block(ModelParams<T>& params, const std::string& prefix, const WindowConfig& cfg) {
  nn::init_layer_norm(params, prefix + ".ln", cfg.channels);
  nn::init_attention(params, prefix + ".attn", cfg.channels);
  nn::init_mlp(params, prefix + ".mlp", cfg.channels, cfg.mlp_hidden, cfg.channels);
}

// F~ = MSA(LN(F), PE) + F, then F' = MLP(F~) + F~.
template <typename T>
Var<T> dual_window_block(nn::Context<T>& ctx, Var<T> f, Var<T> pe, const SubBatches& sb, const WindowConfig& cfg,
                         const std::string& prefix) {
  if (f.cols() != cfg.channels) throw ShapeError("window block: expected " + std::to_string(cfg.channels) + " channels");
  auto active = std::make_shared<const std::vector<std::uint8_t>>(sb.active);
  Var<T> x = nn::layer_norm(ctx, f, prefix + ".ln");
  Var<T> msa = nn::attention_windows(ctx, x, pe, sb.flat(), active, cfg.heads, prefix + ".attn");
  Var<T> ft = ag::add(f, msa);
  return ag::add(ft, nn::mlp_apply(ctx, ft, prefix + ".mlp"));
}

// What the encoder needs per window set: position encodings and sub-batches.
template <typename T>
struct WindowSetInput {
  Tensor<T> pe;
  SubBatches sub;
};

template <typename T>
void init_encoder(ModelParams<T>& params, const std::string& prefix, const WindowConfig& cfg,
                  std::size_t in_channels) {
  cfg.validate();
  if (in_channels != cfg.channels) params.add_dense(prefix + ".input_proj", in_channels, cfg.channels);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) init_window_block(params, prefix + ".block" + std::to_string(b), cfg);
}

// Blocks alternate strictly: even blocks use set 1, odd blocks set 2.
template <typename T>
Var<T> encoder_forward(nn::Context<T>& ctx, Var<T> fv, const WindowSetInput<T>& set1, const WindowSetInput<T>& set2,
                       const WindowConfig& cfg, const std::string& prefix) {
  Var<T> f = fv;
  if (ctx.params.contains(prefix + ".input_proj.weight")) f = nn::dense(ctx, f, prefix + ".input_proj");
  if (f.cols() != cfg.channels) throw ShapeError("encoder: input width does not match channels");
  Var<T> pe1 = ctx.graph.constant(set1.pe);
  Var<T> pe2 = ctx.graph.constant(set2.pe);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const bool even = b % 2 == 0;
    f = dual_window_block(ctx, f, even ? pe1 : pe2, even ? set1.sub : set2.sub, cfg, prefix + ".block" + std::to_string(b));
  }
  return f;
}

// Builds both window sets for a (possibly batched) voxel map.
template <typename T>
std::pair<WindowSetInput<T>, WindowSetInput<T>> prepare_window_sets(const VoxelMap& vmap,
                                                                    const std::vector<std::int32_t>& batch,
                                                                    const WindowConfig& cfg, Phase phase,
                                                                    std::uint64_t seed) {
  const auto spec = SubBatchSpec::for_phase(phase);
  const auto p1 = partition_windows(vmap, cfg, batch);
  const auto p2 = shift_windows(vmap, cfg, batch);
  WindowSetInput<T> s1{position_encoding<T>(p1.voxel_offset, cfg, cfg.channels),
                       assign_subbatches(p1, spec, cfg.volume(), seed)};
  WindowSetInput<T> s2{position_encoding<T>(p2.voxel_offset, cfg, cfg.channels),
                       assign_subbatches(p2, spec, cfg.volume(), seed ^ 0x9e3779b97f4a7c15ULL)};
  return {std::move(s1), std::move(s2)};
}

}  // namespace podseg
