#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "podseg/gradcheck.hpp"
#include "podseg/semantic.hpp"

namespace podseg {
namespace {

Var<double> probe(Var<double> y, std::uint64_t seed = 17) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<double> w(y.rows(), y.cols());
  for (auto& v : w.storage()) v = u(rng);
  return ag::sum_all(ag::mul(y, y.graph->constant(w)));
}

LabeledCloud random_cloud(std::mt19937_64& rng, std::size_t n, Vec3 lo, Vec3 hi) {
  LabeledCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = std::uniform_real_distribution<double>(lo[a], hi[a])(rng);
    c.coords.push_back(p);
  }
  return c;
}

VoxelGrid grid_of(double s) {
  VoxelGrid g;
  g.voxel_size = {s, s, s};
  g.extent = {64, 64, 64};
  return g;
}

TEST(DensePropagationTest, ShapeIsVoxelPlusMlpWidth) {
  std::mt19937_64 rng(1);
  auto c = random_cloud(rng, 20, {0, 0, 0}, {0.2, 0.2, 0.2});
  auto m = dynamic_voxelize(c, grid_of(0.05));
  ModelParams<double> p(1);
  init_dense_propagation(p, "sem", 9, 16, 16);
  Graph<double> g;
  nn::Context<double> ctx{g, p, false};
  auto gv = g.constant(Tensor<double>(m.num_voxels(), 64, 0.5));
  auto f = augment_features<double>(c, m, grid_of(0.05), AugmentFlags{});
  auto out = dense_propagation(ctx, gv, VoxelIndex::from(m), g.constant(f.values), "sem");
  EXPECT_EQ(out.rows(), 20u);
  EXPECT_EQ(out.cols(), 80u);
}

TEST(DensePropagationTest, SameVoxelPointsDifferOnlyInMlpHalf) {
  LabeledCloud c;
  c.coords = {{0.01, 0.01, 0.01}, {0.04, 0.02, 0.03}, {0.09, 0.01, 0.01}};
  auto m = dynamic_voxelize(c, grid_of(0.05));
  ASSERT_EQ(m.point_to_voxel[0], m.point_to_voxel[1]);
  ModelParams<double> p(2);
  init_dense_propagation(p, "sem", 9, 8, 8);
  Graph<double> g;
  nn::Context<double> ctx{g, p, false};
  std::mt19937_64 rng(2);
  Tensor<double> gvv(m.num_voxels(), 6);
  for (auto& v : gvv.storage()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto f = augment_features<double>(c, m, grid_of(0.05), AugmentFlags{});
  const auto& out = dense_propagation(ctx, g.constant(gvv), VoxelIndex::from(m), g.constant(f.values), "sem").value();
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(out(0, j), out(1, j));
  bool differs = false;
  for (std::size_t j = 6; j < 14; ++j) differs |= out(0, j) != out(1, j);
  EXPECT_TRUE(differs);
}

TEST(DensePropagationTest, GradCheck) {
  LabeledCloud c;
  c.coords = {{0.01, 0.01, 0.01}, {0.04, 0.02, 0.03}, {0.09, 0.01, 0.01}, {0.07, 0.08, 0.02}, {0.02, 0.06, 0.09}};
  auto m = dynamic_voxelize(c, grid_of(0.05));
  ModelParams<double> p(3);
  init_dense_propagation(p, "sem", 9, 5, 4);
  const auto vi = VoxelIndex::from(m);
  auto f = augment_features<double>(c, m, grid_of(0.05), AugmentFlags{});
  std::mt19937_64 rng(3);
  Tensor<double> gvv(m.num_voxels(), 3);
  for (auto& v : gvv.storage()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto r = grad_check(
      [&](Graph<double>& g, const std::vector<Var<double>>& leaves) {
        nn::Context<double> ctx{g, p, false};
        return probe(dense_propagation(ctx, leaves[0], vi, leaves[1], "sem"));
      },
      {&gvv, &f.values});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
  auto rp = grad_check_params([&](Graph<double>& g) {
    nn::Context<double> ctx{g, p, false};
    return probe(dense_propagation(ctx, g.constant(gvv), vi, g.constant(f.values), "sem"));
  }, p);
  EXPECT_TRUE(rp.passed) << rp.worst << " err " << rp.max_rel_error;
}

TEST(ClassifyTest, Examples) {
  auto out = semantic_output([] {
    Graph<double> g;
    return ag::softmax_rows(g.constant(Tensor<double>::from_rows(3, 2, {2.0, 1.0, 0.3, 0.3, -1.0, 4.0})))
        .value();
  }());
  EXPECT_NEAR(out.probs(0, 0), 0.7311, 5e-5);
  EXPECT_EQ(out.labels[0], 0);
  EXPECT_EQ(out.labels[1], 0);  // tie
  EXPECT_EQ(out.labels[2], 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out.probs(i, 0) + out.probs(i, 1), 1.0, 1e-12);
}

TEST(ClassifyTest, ArgmaxInvariantUnderMonotoneTransformProperty) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<double> logits(6, 3);
    for (auto& v : logits.storage()) v = u(rng);
    Tensor<double> t = logits;
    const double a = std::uniform_real_distribution<double>(0.1, 3)(rng), b = u(rng);
    for (auto& v : t.storage()) v = std::exp(a * v + b) / 10.0;
    Graph<double> g;
    auto l1 = semantic_output(ag::softmax_rows(g.constant(logits)).value()).labels;
    auto l2 = semantic_output(ag::softmax_rows(g.constant(t)).value()).labels;
    EXPECT_EQ(l1, l2);
  }
}

TEST(ClassifyTest, ClassifierShape) {
  ModelParams<double> p(5);
  init_classifier(p, "head", 76, 2);
  Graph<double> g;
  nn::Context<double> ctx{g, p, false};
  auto out = classify(ctx, g.constant(Tensor<double>(7, 76, 0.1)), "head");
  EXPECT_EQ(out.probs.rows(), 7u);
  EXPECT_EQ(out.probs.cols(), 2u);
  EXPECT_EQ(out.labels.size(), 7u);
}

TEST(SemanticLossTest, Examples) {
  Graph<double> g;
  auto labels = std::make_shared<const std::vector<int>>(std::vector<int>{0, 1, 1});
  auto perfect = g.constant(Tensor<double>::from_rows(3, 2, {1, 0, 0, 1, 0, 1}));
  EXPECT_NEAR(semantic_loss(perfect, labels).value()[0], 0.0, 1e-15);
  auto uniform = g.constant(Tensor<double>(3, 2, 0.5));
  EXPECT_NEAR(semantic_loss(uniform, labels).value()[0], 0.6931, 5e-5);
}

TEST(SemanticLossTest, GradCheckThroughSoftmax) {
  std::mt19937_64 rng(6);
  Tensor<double> logits(5, 2);
  for (auto& v : logits.storage()) v = std::uniform_real_distribution<double>(-2, 2)(rng);
  auto labels = std::make_shared<const std::vector<int>>(std::vector<int>{0, 1, 1, 0, 1});
  auto r = grad_check(
      [&](Graph<double>&, const std::vector<Var<double>>& l) { return semantic_loss(ag::softmax_rows(l[0]), labels); },
      {&logits});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(CropPatchesTest, OneDimensionalStarts) {
  LabeledCloud c;
  for (int i = 0; i <= 32; ++i) c.coords.push_back({i * 0.01, 0.0, 0.0});
  PatchSpec spec;
  std::set<double> s0, s8;
  for (const auto& p : crop_patches(c, spec, 0.0)) s0.insert(std::round(p.start[0] * 1e9) / 1e9);
  for (const auto& p : crop_patches(c, spec, 0.08)) s8.insert(std::round(p.start[0] * 1e9) / 1e9);
  EXPECT_EQ(s0, (std::set<double>{0.0, 0.16}));
  EXPECT_EQ(s8, (std::set<double>{-0.08, 0.08, 0.24}));
}

TEST(CropPatchesTest, PartitionProperty) {
  std::mt19937_64 rng(7);
  PatchSpec spec;
  for (int trial = 0; trial < 20; ++trial) {
    auto c = random_cloud(rng, 300, {0.1, -0.2, 0.0}, {0.5 + 0.05 * trial, 0.3, 0.9});
    for (double off : {0.0, 0.08, 0.03}) {
      std::vector<int> seen(c.size(), 0);
      for (const auto& p : crop_patches(c, spec, off)) {
        EXPECT_FALSE(p.index.empty());
        EXPECT_TRUE(std::is_sorted(p.index.begin(), p.index.end()));
        for (auto i : p.index) ++seen[static_cast<std::size_t>(i)];
      }
      for (int s : seen) EXPECT_EQ(s, 1);
    }
  }
}

TEST(CropPatchesTest, PointsLieInTheirCube) {
  std::mt19937_64 rng(8);
  PatchSpec spec;
  auto c = random_cloud(rng, 400, {0, 0, 0}, {0.4, 0.4, 0.4});
  for (const auto& p : crop_patches(c, spec, 0.08))
    for (auto i : p.index)
      for (int a = 0; a < 3; ++a) {
        const double x = c.coords[static_cast<std::size_t>(i)][a];
        EXPECT_GE(x, p.start[a] - 1e-12);
        // far cube may extend beyond the box; points are still inside it
        EXPECT_LE(x, p.start[a] + spec.patch_len + 1e-9);
      }
}

TEST(CropPatchesTest, MergeSmallPatches) {
  LabeledCloud c;
  for (int i = 0; i < 10; ++i) c.coords.push_back({0.01 * i, 0.01, 0.01});
  c.coords.push_back({0.2, 0.01, 0.01});  // lone point in the second cube
  PatchSpec spec;
  auto patches = crop_patches(c, spec, 0.0);
  ASSERT_EQ(patches.size(), 2u);
  auto merged = merge_small_patches(patches, 5);
  ASSERT_EQ(merged.size(), 1u);
  EXPECT_EQ(merged[0].index.size(), 11u);
  EXPECT_TRUE(std::is_sorted(merged[0].index.begin(), merged[0].index.end()));
}

PatchPrediction position_probs(const LabeledCloud& sub) {
  PatchPrediction pred;
  pred.probs = Tensor<double>(sub.size(), 2);
  for (std::size_t k = 0; k < sub.size(); ++k) {
    const double p = 1.0 / (1.0 + std::exp(-20 * (sub.coords[k][0] - 0.2)));
    pred.probs(k, 0) = 1 - p;
    pred.probs(k, 1) = p;
  }
  return pred;
}

TEST(RegionSlideTest, StrideEqualsLengthIsSinglePass) {
  std::mt19937_64 rng(9);
  auto c = random_cloud(rng, 200, {0, 0, 0}, {0.4, 0.4, 0.4});
  PatchSpec spec;
  spec.stride = spec.patch_len;
  auto r = region_slide_infer(c, spec, 2, [](const LabeledCloud& sub, const Patch&) { return position_probs(sub); });
  EXPECT_EQ(r.passes, 1u);
  auto direct = position_probs(c);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(r.visits[i], 1);
    EXPECT_EQ(r.semantic.probs(i, 1), direct.probs(i, 1));
  }
}

TEST(RegionSlideTest, HalfStrideVisitsTwiceAndAveragesIdempotently) {
  std::mt19937_64 rng(10);
  auto c = random_cloud(rng, 300, {0, 0, 0}, {0.5, 0.3, 0.6});
  PatchSpec spec;
  auto r = region_slide_infer(c, spec, 2, [](const LabeledCloud& sub, const Patch&) { return position_probs(sub); });
  EXPECT_EQ(r.passes, 2u);
  auto direct = position_probs(c);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(r.visits[i], 2);
    EXPECT_NEAR(r.semantic.probs(i, 1), direct.probs(i, 1), 1e-15);
  }
}

TEST(RegionSlideTest, AveragesStayDistributionsProperty) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto c = random_cloud(rng, 150, {0, 0, 0}, {0.45, 0.45, 0.45});
    PatchSpec spec;
    spec.stride = std::uniform_real_distribution<double>(0.03, 0.16)(rng);
    std::mt19937_64 prng(trial);
    auto r = region_slide_infer(c, spec, 2, [&](const LabeledCloud& sub, const Patch&) {
      PatchPrediction pred;
      pred.probs = Tensor<double>(sub.size(), 2);
      for (std::size_t k = 0; k < sub.size(); ++k) {
        const double p = std::uniform_real_distribution<double>(0, 1)(prng);
        pred.probs(k, 0) = 1 - p;
        pred.probs(k, 1) = p;
      }
      return pred;
    });
    for (std::size_t i = 0; i < c.size(); ++i) {
      EXPECT_GE(r.visits[i], 1);
      EXPECT_NEAR(r.semantic.probs(i, 0) + r.semantic.probs(i, 1), 1.0, 1e-9);
    }
  }
}

TEST(RegionSlideTest, RejectsBadStride) {
  PatchSpec spec;
  spec.stride = 0.2;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.stride = 0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace podseg
