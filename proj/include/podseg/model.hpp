#pragma once

#include <memory>
#include <optional>
#include <tuple>
#include <string>
#include <vector>

#include "podseg/dvfe.hpp"
#include "podseg/instance.hpp"
#include "podseg/semantic.hpp"
#include "podseg/window.hpp"

namespace podseg {

struct ModelConfig {
  Vec3 voxel_size{0.006, 0.006, 0.0025};
  AugmentFlags flags{};
  VoxelOffsetMode offset_mode = VoxelOffsetMode::center;
  std::size_t dvfe_mid = 32;
  std::size_t dvfe_out = 64;  // C_1
  WindowConfig window{};
  std::size_t point_hidden = 16;
  std::size_t point_out = 16;
  std::size_t num_classes = 2;
  double input_extent = 0.16;  // coordinate scale of the network input, normally the patch length
  Variant variant = Variant::pst;
  InstanceHeadConfig inst{};

  DvfeConfig dvfe() const { return {flags.channels(), dvfe_mid, dvfe_out, Reduce::max}; }
  std::size_t g_channels() const { return window.channels + point_out; }
  bool has_instance_head() const { return variant != Variant::pst; }

  void validate() const {
    for (double v : voxel_size)
      if (!(v > 0)) throw std::invalid_argument("voxel size must be positive");
    dvfe().validate();
    window.validate();
    inst.validate();
    if (point_hidden < 1 || point_out < 1) throw std::invalid_argument("point MLP widths must be >= 1");
    if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    if (!(input_extent > 0)) throw std::invalid_argument("input_extent must be positive");
  }
};

// Per-channel input scales: coordinates and norm by the input extent, offsets
// by the voxel edge of their axis.
inline std::vector<double> input_scales(const ModelConfig& cfg) {
  std::vector<double> s(3, 1.0 / cfg.input_extent);
  for (bool on : {cfg.flags.use_cluster_centroid, cfg.flags.use_voxel_center})
    if (on)
      for (int a = 0; a < 3; ++a) s.push_back(1.0 / cfg.voxel_size[a]);
  if (cfg.flags.use_l2_norm) s.push_back(1.0 / cfg.input_extent);
  return s;
}

// Parameter names: everything under "pst." is the semantic backbone, "ins."
// the instance head.
template <typename T>
void init_model(ModelParams<T>& params, const ModelConfig& cfg) {
  cfg.validate();
  init_dvfe(params, "pst.dvfe", cfg.dvfe());
  init_encoder(params, "pst.encoder", cfg.window, cfg.dvfe_out);
  init_dense_propagation(params, "pst", cfg.flags.channels(), cfg.point_hidden, cfg.point_out);
  init_classifier(params, "pst.head", cfg.g_channels(), cfg.num_classes);
  if (cfg.has_instance_head()) {
    init_offset_branch(params, "ins.offset", cfg.g_channels(), cfg.inst.offset_hidden);
    init_score_net(params, "ins.score", cfg.g_channels(), cfg.inst.score_channels);
  }
}

// Several patches voxelized independently and concatenated, so batch
// statistics span the whole batch.
template <typename T>
struct PreparedBatch {
  std::vector<std::size_t> point_base;  // start row of each patch, plus the total
  std::vector<Vec3> coords;
  VoxelMap vmap;
  VoxelIndex vi;
  Tensor<T> features;
  WindowSetInput<T> set1, set2;
  std::shared_ptr<const std::vector<int>> sem;  // null unless every patch is labelled
  std::vector<int> inst;                        // ids made unique across patches; empty if unlabelled

  std::size_t num_points() const { return coords.size(); }
  std::size_t num_patches() const { return point_base.size() - 1; }
};

template <typename T>
PreparedBatch<T> prepare_batch(const std::vector<const LabeledCloud*>& patches, const ModelConfig& cfg, Phase phase,
                               std::uint64_t seed) {
  if (patches.empty()) throw std::invalid_argument("prepare_batch: no patches");
  PreparedBatch<T> b;
  std::vector<VoxelMap> maps;
  std::vector<Tensor<T>> feats;
  std::vector<std::int32_t> batch;
  bool all_sem = true, all_inst = true;
  for (const auto* p : patches) {
    all_sem &= p->has_sem();
    all_inst &= p->has_inst();
  }
  auto sem = std::make_shared<std::vector<int>>();
  const auto scales = input_scales(cfg);
  int inst_base = 0;
  b.point_base.push_back(0);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const LabeledCloud& p = *patches[k];
    if (p.size() == 0) throw std::invalid_argument("prepare_batch: empty patch");
    // each patch is seen in its own frame, anchored at its lowest corner
    LabeledCloud local;
    local.coords = p.coords;
    const Vec3 lo = bounds_of(p.coords).min;
    for (auto& q : local.coords)
      for (int a = 0; a < 3; ++a) q[a] -= lo[a];
    const auto grid = VoxelGrid::around(local.coords, cfg.voxel_size);
    maps.push_back(dynamic_voxelize(local, grid));
    feats.push_back(augment_features<T>(local, maps.back(), grid, cfg.flags, cfg.offset_mode).values);
    auto& f = feats.back();
    for (std::size_t i = 0; i < f.rows(); ++i)
      for (std::size_t j = 0; j < f.cols(); ++j) f(i, j) = static_cast<T>(f(i, j) * scales[j]);
    batch.insert(batch.end(), maps.back().num_voxels(), static_cast<std::int32_t>(k));
    b.coords.insert(b.coords.end(), p.coords.begin(), p.coords.end());
    b.point_base.push_back(b.coords.size());
    if (all_sem) sem->insert(sem->end(), p.sem->begin(), p.sem->end());
    if (all_inst) {
      int top = -1;
      for (int id : *p.inst) {
        b.inst.push_back(id < 0 ? kNoInstance : id + inst_base);
        top = std::max(top, id);
      }
      inst_base += top + 1;
    }
  }
  std::vector<const VoxelMap*> ptrs;
  for (const auto& m : maps) ptrs.push_back(&m);
  b.vmap = concat_maps(ptrs);
  b.vi = VoxelIndex::from(b.vmap);
  const std::size_t c = cfg.flags.channels();
  b.features = Tensor<T>(b.coords.size(), c);
  std::size_t row = 0;
  for (const auto& f : feats) {
    std::copy(f.storage().begin(), f.storage().end(), b.features.storage().begin() + static_cast<std::ptrdiff_t>(row * c));
    row += f.rows();
  }
  std::tie(b.set1, b.set2) = prepare_window_sets<T>(b.vmap, batch, cfg.window, phase, seed);
  if (all_sem) b.sem = sem;
  return b;
}

template <typename T>
struct ModelOutput {
  Var<T> g;       // dense point features
  Var<T> logits;  // N x C_cls
  std::optional<Var<T>> offsets;
};

template <typename T>
ModelOutput<T> forward(nn::Context<T>& ctx, const PreparedBatch<T>& b, const ModelConfig& cfg) {
  auto dv = dvfe_encode(ctx, ctx.graph.constant(b.features), b.vi, cfg.dvfe(), "pst.dvfe");
  Var<T> gv = encoder_forward(ctx, dv.voxel_features, b.set1, b.set2, cfg.window, "pst.encoder");
  ModelOutput<T> out;
  out.g = dense_propagation(ctx, gv, b.vi, dv.point_input, "pst");
  out.logits = classify_logits(ctx, out.g, "pst.head");
  if (cfg.has_instance_head()) out.offsets = offset_branch(ctx, out.g, "ins.offset");
  return out;
}

// Dual-space proposals per patch of a batch, members indexed into the batch.
inline std::vector<InstanceProposal> batch_proposals(const std::vector<std::size_t>& point_base,
                                                     const std::vector<Vec3>& coords, const std::vector<Vec3>& shifted,
                                                     const std::vector<int>& sem, const InstanceHeadConfig& cfg) {
  std::vector<InstanceProposal> out;
  for (std::size_t k = 0; k + 1 < point_base.size(); ++k) {
    const auto lo = static_cast<std::ptrdiff_t>(point_base[k]), hi = static_cast<std::ptrdiff_t>(point_base[k + 1]);
    std::vector<Vec3> p(coords.begin() + lo, coords.begin() + hi), ps(shifted.begin() + lo, shifted.begin() + hi);
    std::vector<int> s(sem.begin() + lo, sem.begin() + hi);
    for (auto& prop : dual_set_cluster(p, ps, s, cfg)) {
      for (auto& i : prop.members) i += lo;
      out.push_back(std::move(prop));
    }
  }
  return out;
}

// ---- inference ---------------------------------------------------------------------

template <typename T>
PatchPrediction predict_patch(ModelParams<T>& params, const ModelConfig& cfg, const LabeledCloud& patch,
                              bool want_features) {
  Graph<T> g;
  nn::Context<T> ctx{g, params, false};
  const auto b = prepare_batch<T>({&patch}, cfg, Phase::inference, 0);
  const auto out = forward(ctx, b, cfg);
  PatchPrediction pred;
  pred.probs = ag::softmax_rows(out.logits).value().template cast<double>();
  if (out.offsets) pred.offsets = out.offsets->value().template cast<double>();
  if (want_features) pred.features = out.g.value().template cast<double>();
  return pred;
}

struct CloudPrediction {
  SemanticOutput semantic;
  std::vector<int> visits;
  std::vector<Vec3> shifted;  // empty without an instance head
  std::vector<InstanceProposal> proposals;
  std::vector<std::size_t> kept;
  InstanceAssignment instances;
};

// Scores, suppresses and assigns proposals given per-point features.
template <typename T>
void finish_instances(ModelParams<T>& params, const ModelConfig& cfg, const std::vector<Vec3>& coords,
                      const Tensor<double>& features, CloudPrediction& out) {
  if (!out.proposals.empty()) {
    Graph<T> g;
    nn::Context<T> ctx{g, params, false};
    score_clusters(ctx, g.constant(features.template cast<T>()), coords, out.proposals, "ins.score");
  }
  out.kept = nms(out.proposals, cfg.inst.nms_iou);
  out.instances = assign_instances(coords.size(), out.proposals, out.kept);
}

// Region-slide semantic inference; with an instance head, also the averaged
// offsets, dual-set proposals over the whole cloud, scores, NMS.
template <typename T>
CloudPrediction infer_cloud(ModelParams<T>& params, const ModelConfig& cfg, const PatchSpec& spec,
                            const LabeledCloud& cloud) {
  const bool inst = cfg.has_instance_head();
  auto slide = region_slide_infer(cloud, spec, cfg.num_classes, [&](const LabeledCloud& sub, const Patch&) {
    return predict_patch(params, cfg, sub, inst);
  });
  CloudPrediction out;
  out.semantic = std::move(slide.semantic);
  out.visits = std::move(slide.visits);
  if (!inst) return out;
  out.shifted = shifted_coords(cloud.coords, slide.offsets);
  out.proposals = dual_set_cluster(cloud.coords, out.shifted, out.semantic.labels, cfg.inst);
  finish_instances(params, cfg, cloud.coords, slide.features, out);
  return out;
}

}  // namespace podseg
