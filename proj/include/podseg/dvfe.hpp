#pragma once

#include <memory>
#include <optional>
#include <string>
#include <type_traits>

#include "podseg/cloud.hpp"
#include "podseg/layers.hpp"

namespace podseg {

struct DvfeConfig {
  std::size_t in_channels = 9;
  std::size_t mid_channels = 32;
  std::size_t out_channels = 64;
  Reduce aggregate = Reduce::max;

  void validate() const {
    if (in_channels < 1 || mid_channels < 1 || out_channels < 1)
      throw std::invalid_argument("dvfe: channel counts must be >= 1");
  }
};

// Index views of a VoxelMap, shared with the autograd ops that need them.
struct VoxelIndex {
  std::shared_ptr<const Groups> voxel_to_points;
  std::shared_ptr<const IndexList> point_to_voxel;
  std::size_t num_points = 0;
  std::size_t num_voxels = 0;

  static VoxelIndex from(const VoxelMap& m) {
    return {std::make_shared<const Groups>(m.voxel_to_points), std::make_shared<const IndexList>(m.point_to_voxel),
            m.num_points(), m.num_voxels()};
  }
};

template <typename T>
struct VfeOutput {
  Var<T> points;  // point-wise learned features
  Var<T> voxels;  // aggregated per voxel
};

template <typename T>
void init_dvfe(ModelParams<T>& params, const std::string& prefix, const DvfeConfig& cfg) {
  cfg.validate();
  nn::init_fcn(params, prefix + ".vfe1", cfg.in_channels, cfg.mid_channels);
  nn::init_fcn(params, prefix + ".vfe2_inner", cfg.in_channels, cfg.mid_channels);
  nn::init_fcn(params, prefix + ".vfe2", 2 * cfg.mid_channels, cfg.out_channels);
}

// One VFE layer. Without `context` it is FCN followed by aggregation. With
// the previous layer's voxel features it aggregates
// FCN(concat(propagate(context), FCN_inner(x))).
template <typename T>
VfeOutput<T> vfe_layer(nn::Context<T>& ctx, Var<T> x, const VoxelIndex& vi, const std::string& prefix,
                       std::type_identity_t<std::optional<Var<T>>> context, Reduce mode) {
  if (x.rows() != vi.num_points) throw ShapeError("vfe_layer: expected one feature row per point");
  Var<T> h;
  if (!context) {
    h = nn::fcn_apply(ctx, x, prefix);
  } else {
    if (context->rows() != vi.num_voxels) throw ShapeError("vfe_layer: context must be voxel-wise");
    Var<T> inner = nn::fcn_apply(ctx, x, prefix + "_inner");
    h = nn::fcn_apply(ctx, ag::concat_cols(ag::gather_rows(*context, vi.point_to_voxel), inner), prefix);
  }
  return {h, ag::segment_reduce(h, vi.voxel_to_points, mode)};
}

template <typename T>
struct DvfeOutput {
  Var<T> voxel_features;  // F^V, N_V x C_1
  Var<T> point_input;     // augmented point features, kept for the dense propagation
  Var<T> point_hidden;    // last VFE layer's point features
};

template <typename T>
DvfeOutput<T> dvfe_encode(nn::Context<T>& ctx, Var<T> point_features, const VoxelIndex& vi, const DvfeConfig& cfg,
                          const std::string& prefix) {
  if (point_features.cols() != cfg.in_channels)
    throw ShapeError("dvfe: feature width " + std::to_string(point_features.cols()) + " but in_channels " +
                     std::to_string(cfg.in_channels));
  auto l1 = vfe_layer(ctx, point_features, vi, prefix + ".vfe1", std::nullopt, cfg.aggregate);
  auto l2 = vfe_layer(ctx, point_features, vi, prefix + ".vfe2", std::optional<Var<T>>(l1.voxels), cfg.aggregate);
  return {l2.voxels, point_features, l2.points};
}

// Full pipeline from a cloud: voxelize, augment, two VFE layers.
template <typename T>
struct DvfeResult {
  DvfeOutput<T> out;
  VoxelMap vmap;
};

template <typename T>
DvfeResult<T> dvfe_forward(nn::Context<T>& ctx, const LabeledCloud& cloud, const VoxelGrid& grid,
                           const AugmentFlags& flags, const DvfeConfig& cfg, const std::string& prefix,
                           VoxelOffsetMode mode = VoxelOffsetMode::center) {
  DvfeResult<T> r;
  r.vmap = dynamic_voxelize(cloud, grid);
  auto feats = augment_features<T>(cloud, r.vmap, grid, flags, mode);
  r.out = dvfe_encode(ctx, ctx.graph.constant(std::move(feats.values)), VoxelIndex::from(r.vmap), cfg, prefix);
  return r;
}

}  // namespace podseg
