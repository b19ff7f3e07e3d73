#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "podseg/cloud.hpp"
#include "podseg/dvfe.hpp"
#include "podseg/layers.hpp"

namespace podseg {

struct PatchSpec {
  double patch_len = 0.16;
  std::vector<double> offsets{0.0, 0.08};  // training tilings
  double stride = 0.08;                    // inference slide step
  std::size_t min_patch_points = 5;

  void validate() const {
    if (!(patch_len > 0)) throw std::invalid_argument("patch_len must be positive");
    if (!(stride > 0) || stride > patch_len + 1e-12) throw std::invalid_argument("stride must be in (0, patch_len]");
    if (offsets.empty()) throw std::invalid_argument("at least one patch offset is required");
  }
};

struct SemanticOutput {
  Tensor<double> probs;  // N x C_cls
  std::vector<int> labels;
};

template <typename T>
int argmax_row(const T* p, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (p[j] > p[best]) best = j;
  return static_cast<int>(best);
}

inline SemanticOutput semantic_output(Tensor<double> probs) {
  SemanticOutput out;
  out.labels.resize(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) out.labels[i] = argmax_row(probs.data() + i * probs.cols(), probs.cols());
  out.probs = std::move(probs);
  return out;
}

// ---- dense propagation and classification --------------------------------------

template <typename T>
void init_dense_propagation(ModelParams<T>& params, const std::string& prefix, std::size_t in, std::size_t hidden,
                            std::size_t out) {
  nn::init_mlp(params, prefix + ".point_mlp", in, hidden, out);
}

// G = concat(propagate(G^V), MLP(F)).
template <typename T>
Var<T> dense_propagation(nn::Context<T>& ctx, Var<T> gv, const VoxelIndex& vi, Var<T> point_input,
                         const std::string& prefix) {
  if (gv.rows() != vi.num_voxels || point_input.rows() != vi.num_points)
    throw ShapeError("dense_propagation: feature rows do not match the voxel map");
  return ag::concat_cols(ag::gather_rows(gv, vi.point_to_voxel), nn::mlp_apply(ctx, point_input, prefix + ".point_mlp"));
}

template <typename T>
void init_classifier(ModelParams<T>& params, const std::string& prefix, std::size_t in, std::size_t classes) {
  params.add_dense(prefix + ".fc", in, classes);
}

// Per-point logits; probabilities are softmax(logits).
template <typename T>
Var<T> classify_logits(nn::Context<T>& ctx, Var<T> g, const std::string& prefix) {
  return nn::dense(ctx, g, prefix + ".fc");
}

template <typename T>
SemanticOutput classify(nn::Context<T>& ctx, Var<T> g, const std::string& prefix) {
  return semantic_output(ag::softmax_rows(classify_logits(ctx, g, prefix)).value().template cast<double>());
}

// Mean negative log-likelihood of the labels under `probs`.
template <typename T>
Var<T> semantic_loss(Var<T> probs, std::shared_ptr<const std::vector<int>> labels) {
  return ag::nll_probs(probs, labels);
}

// ---- patches -------------------------------------------------------------------

using PatchCell = std::array<std::int64_t, 3>;

struct Patch {
  IndexList index;  // into the source cloud, ascending
  PatchCell cell{};
  Vec3 start{};
  double offset = 0.0;
};

// Tiles the bounding box with cubes of side patch_len. With a nonzero offset
// the first cube per axis starts at min + (offset mod len) - len, so the
// tiling is the offset-0 tiling moved by `offset`. Every point falls in
// exactly one cube; empty cubes are omitted.
inline std::vector<Patch> crop_patches(const LabeledCloud& cloud, const PatchSpec& spec, double offset) {
  spec.validate();
  if (cloud.size() == 0) throw std::invalid_argument("crop_patches: empty cloud");
  const auto b = bounds_of(cloud.coords);
  const double len = spec.patch_len;
  const double shift = std::fmod(offset, len);
  Vec3 start0{};
  std::array<std::int64_t, 3> n{};
  for (int a = 0; a < 3; ++a) {
    start0[a] = shift > 1e-12 ? b.min[a] + shift - len : b.min[a];
    n[a] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil((b.max[a] - start0[a]) / len - 1e-9)));
  }
  std::map<PatchCell, IndexList> cells;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    PatchCell c{};
    for (int a = 0; a < 3; ++a) {
      auto k = static_cast<std::int64_t>(std::floor((cloud.coords[i][a] - start0[a]) / len));
      c[a] = std::clamp<std::int64_t>(k, 0, n[a] - 1);
    }
    cells[c].push_back(static_cast<std::int64_t>(i));
  }
  std::vector<Patch> out;
  for (auto& [c, idx] : cells) {
    Patch p;
    p.index = std::move(idx);
    p.cell = c;
    for (int a = 0; a < 3; ++a) p.start[a] = start0[a] + static_cast<double>(c[a]) * len;
    p.offset = offset;
    out.push_back(std::move(p));
  }
  return out;
}

// Patches below `min_points` are folded into the nearest patch (by cell
// distance, ties to the earlier patch) that is large enough.
inline std::vector<Patch> merge_small_patches(std::vector<Patch> patches, std::size_t min_points) {
  std::vector<std::size_t> big, small;
  for (std::size_t i = 0; i < patches.size(); ++i) (patches[i].index.size() >= min_points ? big : small).push_back(i);
  if (small.empty()) return patches;
  if (big.empty()) {
    Patch all = patches[0];
    for (std::size_t i = 1; i < patches.size(); ++i)
      all.index.insert(all.index.end(), patches[i].index.begin(), patches[i].index.end());
    std::sort(all.index.begin(), all.index.end());
    return {all};
  }
  for (auto s : small) {
    std::size_t target = big[0];
    std::int64_t best = -1;
    for (auto t : big) {
      std::int64_t d = 0;
      for (int a = 0; a < 3; ++a) d += (patches[s].cell[a] - patches[t].cell[a]) * (patches[s].cell[a] - patches[t].cell[a]);
      if (best < 0 || d < best) {
        best = d;
        target = t;
      }
    }
    auto& dst = patches[target].index;
    dst.insert(dst.end(), patches[s].index.begin(), patches[s].index.end());
    std::sort(dst.begin(), dst.end());
  }
  std::vector<Patch> out;
  for (auto t : big) out.push_back(std::move(patches[t]));
  return out;
}

// ---- region-slide inference --------------------------------------------------------

struct PatchPrediction {
  Tensor<double> probs;     // n x C_cls
  Tensor<double> offsets;   // n x 3, empty without an instance head
  Tensor<double> features;  // n x C_G, empty unless requested
};

struct SlideResult {
  SemanticOutput semantic;
  std::vector<int> visits;
  Tensor<double> offsets;
  Tensor<double> features;
  std::size_t passes = 0;
};

inline std::vector<double> slide_offsets(const PatchSpec& spec) {
  spec.validate();
  std::vector<double> out;
  for (std::size_t k = 0; static_cast<double>(k) * spec.stride < spec.patch_len - 1e-12; ++k)
    out.push_back(static_cast<double>(k) * spec.stride);
  return out;
}

// One tiling per slide offset; every point is predicted once per tiling and
// the per-point outputs are averaged over the visits.
template <typename Predict>
SlideResult region_slide_infer(const LabeledCloud& cloud, const PatchSpec& spec, std::size_t num_classes,
                               Predict&& predict) {
  const std::size_t n = cloud.size();
  SlideResult r;
  Tensor<double> acc(n, num_classes);
  r.visits.assign(n, 0);
  for (double off : slide_offsets(spec)) {
    ++r.passes;
    for (const auto& patch : crop_patches(cloud, spec, off)) {
      const LabeledCloud sub = cloud.subset(patch.index);
      const PatchPrediction pred = predict(sub, patch);
      if (pred.probs.rows() != sub.size() || pred.probs.cols() != num_classes)
        throw ShapeError("region_slide_infer: prediction shape does not match the patch");
      if (!pred.offsets.empty() && r.offsets.empty()) r.offsets = Tensor<double>(n, pred.offsets.cols());
      if (!pred.features.empty() && r.features.empty()) r.features = Tensor<double>(n, pred.features.cols());
      for (std::size_t k = 0; k < sub.size(); ++k) {
        const auto i = static_cast<std::size_t>(patch.index[k]);
        ++r.visits[i];
        for (std::size_t j = 0; j < num_classes; ++j) acc(i, j) += pred.probs(k, j);
        if (!pred.offsets.empty())
          for (std::size_t j = 0; j < pred.offsets.cols(); ++j) r.offsets(i, j) += pred.offsets(k, j);
        if (!pred.features.empty())
          for (std::size_t j = 0; j < pred.features.cols(); ++j) r.features(i, j) += pred.features(k, j);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (r.visits[i] == 0) throw std::logic_error("region_slide_infer: point " + std::to_string(i) + " never covered");
    const double inv = 1.0 / r.visits[i];
    for (std::size_t j = 0; j < num_classes; ++j) acc(i, j) *= inv;
    if (!r.offsets.empty())
      for (std::size_t j = 0; j < r.offsets.cols(); ++j) r.offsets(i, j) *= inv;
    if (!r.features.empty())
      for (std::size_t j = 0; j < r.features.cols(); ++j) r.features(i, j) *= inv;
  }
  r.semantic = semantic_output(std::move(acc));
  return r;
}

}  // namespace podseg
