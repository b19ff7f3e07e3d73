#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "podseg/reduce.hpp"
#include "podseg/tensor.hpp"

namespace podseg {

using Vec3 = std::array<double, 3>;
using VoxelCoord = std::array<std::int32_t, 3>;

inline constexpr int kNonSilique = 0;
inline constexpr int kSilique = 1;
inline constexpr int kNoInstance = -1;
inline constexpr std::int64_t kDropped = -1;

// N points with optional per-point semantic class and instance id.
struct LabeledCloud {
  std::string id;
  std::vector<Vec3> coords;
  std::optional<std::vector<int>> sem;
  std::optional<std::vector<int>> inst;

  std::size_t size() const { return coords.size(); }
  bool has_sem() const { return sem.has_value(); }
  bool has_inst() const { return inst.has_value(); }

  // Throws std::invalid_argument describing the first violated invariant.
  void validate(int num_classes = 2) const {
    for (std::size_t i = 0; i < coords.size(); ++i)
      for (double v : coords[i])
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite coordinate at point " + std::to_string(i));
    if (sem) {
      if (sem->size() != coords.size()) throw std::invalid_argument("sem length differs from point count");
      for (std::size_t i = 0; i < sem->size(); ++i)
        if ((*sem)[i] < 0 || (*sem)[i] >= num_classes)
          throw std::invalid_argument("sem id out of range at point " + std::to_string(i));
    }
    if (inst) {
      if (inst->size() != coords.size()) throw std::invalid_argument("inst length differs from point count");
      if (sem)
        for (std::size_t i = 0; i < inst->size(); ++i)
          if ((*sem)[i] != kSilique && (*inst)[i] != kNoInstance)
            throw std::invalid_argument("non-silique point " + std::to_string(i) + " carries an instance id");
    }
  }

  LabeledCloud subset(const std::vector<std::int64_t>& idx) const {
    LabeledCloud out;
    out.id = id;
    out.coords.reserve(idx.size());
    for (auto i : idx) out.coords.push_back(coords[static_cast<std::size_t>(i)]);
    if (sem) {
      out.sem.emplace();
      for (auto i : idx) out.sem->push_back((*sem)[static_cast<std::size_t>(i)]);
    }
    if (inst) {
      out.inst.emplace();
      for (auto i : idx) out.inst->push_back((*inst)[static_cast<std::size_t>(i)]);
    }
    return out;
  }
};

struct Bounds {
  Vec3 min{};
  Vec3 max{};
};

inline Bounds bounds_of(const std::vector<Vec3>& pts) {
  if (pts.empty()) throw std::invalid_argument("bounds of an empty cloud");
  Bounds b{pts[0], pts[0]};
  for (const auto& p : pts)
    for (int a = 0; a < 3; ++a) {
      b.min[a] = std::min(b.min[a], p[a]);
      b.max[a] = std::max(b.max[a], p[a]);
    }
  return b;
}

struct VoxelGrid {
  Vec3 origin{};
  Vec3 voxel_size{1, 1, 1};
  std::array<std::int64_t, 3> extent{1, 1, 1};

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (!(voxel_size[a] > 0)) throw std::invalid_argument("voxel size must be positive");
      if (extent[a] < 1) throw std::invalid_argument("grid extent must be >= 1");
      if (extent[a] >= (std::int64_t{1} << 21)) throw std::invalid_argument("grid extent too large");
    }
  }

  // Grid whose origin is the cloud's min corner minus `pad`, sized to cover every point.
  static VoxelGrid around(const std::vector<Vec3>& pts, const Vec3& voxel_size, double pad = 1e-6) {
    const auto b = bounds_of(pts);
    VoxelGrid g;
    g.voxel_size = voxel_size;
    for (int a = 0; a < 3; ++a) {
      g.origin[a] = b.min[a] - pad;
      g.extent[a] = static_cast<std::int64_t>(std::floor((b.max[a] - g.origin[a]) / voxel_size[a])) + 1;
    }
    g.validate();
    return g;
  }
};

// Bidirectional point<->voxel assignment. Only occupied voxels are stored,
// ordered lexicographically by (z, y, x).
struct VoxelMap {
  std::vector<VoxelCoord> voxel_coords;
  std::vector<std::int64_t> point_to_voxel;  // kDropped for points removed by hard voxelization
  Groups voxel_to_points;                    // ascending point indices
  std::vector<std::size_t> counts;

  std::size_t num_voxels() const { return voxel_coords.size(); }
  std::size_t num_points() const { return point_to_voxel.size(); }
};

class OutOfBounds : public std::out_of_range {
 public:
  explicit OutOfBounds(std::size_t point)
      : std::out_of_range("point " + std::to_string(point) + " lies outside the voxel grid"), point_(point) {}
  std::size_t point_index() const { return point_; }

 private:
  std::size_t point_;
};

inline VoxelCoord voxel_of(const Vec3& p, const VoxelGrid& grid, std::size_t index) {
  VoxelCoord c{};
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor((p[a] - grid.origin[a]) / grid.voxel_size[a]);
    if (!(f >= 0) || f >= static_cast<double>(grid.extent[a])) throw OutOfBounds(index);
    c[a] = static_cast<std::int32_t>(f);
  }
  return c;
}

inline std::uint64_t voxel_key(const VoxelCoord& c) {
  return (static_cast<std::uint64_t>(c[2]) << 42) | (static_cast<std::uint64_t>(c[1]) << 21) |
         static_cast<std::uint64_t>(c[0]);
}

inline VoxelMap dynamic_voxelize(const std::vector<Vec3>& pts, const VoxelGrid& grid) {
  grid.validate();
  std::vector<std::pair<std::uint64_t, std::uint32_t>> keyed(pts.size());
  std::vector<VoxelCoord> coords(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    coords[i] = voxel_of(pts[i], grid, i);
    keyed[i] = {voxel_key(coords[i]), static_cast<std::uint32_t>(i)};
  }
  std::sort(keyed.begin(), keyed.end());
  VoxelMap m;
  m.point_to_voxel.assign(pts.size(), kDropped);
  for (std::size_t k = 0; k < keyed.size(); ++k) {
    const auto [key, idx] = keyed[k];
    if (k == 0 || key != keyed[k - 1].first) {
      m.voxel_coords.push_back(coords[idx]);
      m.voxel_to_points.emplace_back();
    }
    m.voxel_to_points.back().push_back(idx);
    m.point_to_voxel[idx] = static_cast<std::int64_t>(m.voxel_coords.size() - 1);
  }
  for (const auto& v : m.voxel_to_points) m.counts.push_back(v.size());
  return m;
}

inline VoxelMap dynamic_voxelize(const LabeledCloud& cloud, const VoxelGrid& grid) {
  return dynamic_voxelize(cloud.coords, grid);
}

// Fixed-capacity assignment: voxels holding more than `capacity` points keep a
// uniform random subset (without replacement) drawn from a generator seeded
// with `seed`, visiting voxels in map order.
inline VoxelMap hard_voxelize(const LabeledCloud& cloud, const VoxelGrid& grid, std::size_t capacity,
                              std::uint64_t seed) {
  if (capacity < 1) throw std::invalid_argument("hard_voxelize: capacity must be >= 1");
  VoxelMap m = dynamic_voxelize(cloud, grid);
  std::mt19937_64 rng(seed);
  for (std::size_t v = 0; v < m.num_voxels(); ++v) {
    auto& members = m.voxel_to_points[v];
    if (members.size() <= capacity) continue;
    for (std::size_t i = 0; i < capacity; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, members.size() - 1);
      std::swap(members[i], members[pick(rng)]);
    }
    for (std::size_t i = capacity; i < members.size(); ++i)
      m.point_to_voxel[static_cast<std::size_t>(members[i])] = kDropped;
    members.resize(capacity);
    std::sort(members.begin(), members.end());
    m.counts[v] = capacity;
  }
  return m;
}

// Per point: mean coordinate of all points sharing its voxel.
inline std::vector<Vec3> cluster_centroids(const LabeledCloud& cloud, const VoxelMap& vmap) {
  std::vector<Vec3> voxel_mean(vmap.num_voxels(), Vec3{0, 0, 0});
  for (std::size_t v = 0; v < vmap.num_voxels(); ++v) {
    for (auto i : vmap.voxel_to_points[v])
      for (int a = 0; a < 3; ++a) voxel_mean[v][a] += cloud.coords[static_cast<std::size_t>(i)][a];
    for (int a = 0; a < 3; ++a) voxel_mean[v][a] /= static_cast<double>(vmap.voxel_to_points[v].size());
  }
  std::vector<Vec3> out(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto v = vmap.point_to_voxel[i];
    out[i] = v == kDropped ? cloud.coords[i] : voxel_mean[static_cast<std::size_t>(v)];
  }
  return out;
}

inline std::vector<Vec3> voxel_centers(const VoxelMap& vmap, const VoxelGrid& grid) {
  std::vector<Vec3> out(vmap.num_voxels());
  for (std::size_t v = 0; v < vmap.num_voxels(); ++v)
    for (int a = 0; a < 3; ++a)
      out[v][a] = grid.origin[a] + (static_cast<double>(vmap.voxel_coords[v][a]) + 0.5) * grid.voxel_size[a];
  return out;
}

enum class Resolution { point_wise, voxel_wise };

template <typename T>
struct FeatureMap {
  Tensor<T> values;  // M x C
  Resolution resolution = Resolution::point_wise;
  std::vector<std::int64_t> argmax;  // voxel_wise max aggregation: winning point per (voxel, channel)

  std::size_t rows() const { return values.rows(); }
  std::size_t channels() const { return values.cols(); }
};

struct AugmentFlags {
  bool use_cluster_centroid = true;
  bool use_voxel_center = true;
  bool use_l2_norm = false;

  std::size_t channels() const {
    return 3 + (use_cluster_centroid ? 3 : 0) + (use_voxel_center ? 3 : 0) + (use_l2_norm ? 1 : 0);
  }
};

// What gets subtracted for the voxel term: the voxel center in meters, or the
// raw integer voxel index.
enum class VoxelOffsetMode { center, index };

// Point-wise input features: (x,y,z), then p - cluster centroid, then
// p - voxel center, then |p|, each behind its flag.
template <typename T>
FeatureMap<T> augment_features(const LabeledCloud& cloud, const VoxelMap& vmap, const VoxelGrid& grid,
                               const AugmentFlags& flags, VoxelOffsetMode mode = VoxelOffsetMode::center) {
  const std::size_t c = flags.channels();
  FeatureMap<T> f;
  f.resolution = Resolution::point_wise;
  f.values = Tensor<T>(cloud.size(), c);
  std::vector<Vec3> pc;
  if (flags.use_cluster_centroid) pc = cluster_centroids(cloud, vmap);
  std::vector<Vec3> centers;
  if (flags.use_voxel_center && mode == VoxelOffsetMode::center) centers = voxel_centers(vmap, grid);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.coords[i];
    auto row = f.values.row(i);
    std::size_t k = 0;
    for (int a = 0; a < 3; ++a) row[k++] = static_cast<T>(p[a]);
    if (flags.use_cluster_centroid)
      for (int a = 0; a < 3; ++a) row[k++] = static_cast<T>(p[a] - pc[i][a]);
    if (flags.use_voxel_center) {
      const auto v = vmap.point_to_voxel[i];
      for (int a = 0; a < 3; ++a) {
        double ref = p[a];
        if (v != kDropped)
          ref = mode == VoxelOffsetMode::center ? centers[static_cast<std::size_t>(v)][a]
                                                : static_cast<double>(vmap.voxel_coords[static_cast<std::size_t>(v)][a]);
        row[k++] = static_cast<T>(p[a] - ref);
      }
    }
    if (flags.use_l2_norm) row[k++] = static_cast<T>(std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  return f;
}

template <typename T>
FeatureMap<T> scatter_aggregate(const FeatureMap<T>& feat, const VoxelMap& vmap, Reduce mode) {
  if (feat.resolution != Resolution::point_wise || feat.rows() != vmap.num_points())
    throw ShapeError("scatter_aggregate: expected a point-wise map with one row per point");
  FeatureMap<T> out;
  out.resolution = Resolution::voxel_wise;
  out.values = kernels::segment_reduce(feat.values, vmap.voxel_to_points, mode,
                                       mode == Reduce::max ? &out.argmax : nullptr);
  return out;
}

template <typename T>
FeatureMap<T> propagate(const FeatureMap<T>& feat, const VoxelMap& vmap) {
  if (feat.resolution != Resolution::voxel_wise || feat.rows() != vmap.num_voxels())
    throw ShapeError("propagate: expected a voxel-wise map with one row per voxel");
  FeatureMap<T> out;
  out.resolution = Resolution::point_wise;
  out.values = kernels::gather_rows(feat.values, vmap.point_to_voxel);
  return out;
}

// Concatenates voxel maps of independent clouds (a batch): point and voxel
// indices of later maps are shifted past the earlier ones.
inline VoxelMap concat_maps(const std::vector<const VoxelMap*>& maps) {
  VoxelMap out;
  std::int64_t point_base = 0, voxel_base = 0;
  for (const auto* m : maps) {
    out.voxel_coords.insert(out.voxel_coords.end(), m->voxel_coords.begin(), m->voxel_coords.end());
    for (auto v : m->point_to_voxel) out.point_to_voxel.push_back(v == kDropped ? kDropped : v + voxel_base);
    for (const auto& members : m->voxel_to_points) {
      IndexList shifted(members);
      for (auto& i : shifted) i += point_base;
      out.voxel_to_points.push_back(std::move(shifted));
    }
    out.counts.insert(out.counts.end(), m->counts.begin(), m->counts.end());
    point_base += static_cast<std::int64_t>(m->num_points());
    voxel_base += static_cast<std::int64_t>(m->num_voxels());
  }
  return out;
}

}  // namespace podseg
