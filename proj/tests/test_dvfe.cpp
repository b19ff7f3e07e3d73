#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "podseg/dvfe.hpp"
#include "podseg/gradcheck.hpp"

namespace podseg {
namespace {

VoxelGrid unit_grid() {
  VoxelGrid g;
  g.voxel_size = {1, 1, 1};
  g.extent = {4, 4, 4};
  return g;
}

LabeledCloud random_cloud(std::mt19937_64& rng, std::size_t n, double span) {
  std::uniform_real_distribution<double> u(0, span);
  LabeledCloud c;
  for (std::size_t i = 0; i < n; ++i) c.coords.push_back({u(rng), u(rng), u(rng)});
  return c;
}

Var<double> probe(Var<double> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<double> w(y.rows(), y.cols());
  for (auto& v : w.storage()) v = u(rng);
  return ag::sum_all(ag::mul(y, y.graph->constant(w)));
}

TEST(VfeTest, SingletonVoxelsEqualPointOutput) {
  LabeledCloud c;
  c.coords = {{0.5, 0.5, 0.5}, {1.5, 0.5, 0.5}, {2.5, 2.5, 0.5}};
  auto m = dynamic_voxelize(c, unit_grid());
  ModelParams<double> p(1);
  nn::init_fcn(p, "v", 9, 8);
  Graph<double> g;
  nn::Context<double> ctx{g, p, false};
  auto f = augment_features<double>(c, m, unit_grid(), AugmentFlags{});
  auto out = vfe_layer(ctx, g.constant(f.values), VoxelIndex::from(m), "v", std::nullopt, Reduce::max);
  EXPECT_EQ(out.voxels.value().storage(), out.points.value().storage());
}

TEST(DvfeTest, ShapeContract) {
  std::mt19937_64 rng(2);
  LabeledCloud c;
  c.coords = {{0.1, 0.1, 0.1}, {0.2, 0.3, 0.1}, {0.9, 0.9, 0.9}, {1.5, 0.5, 0.5},
              {1.2, 0.1, 0.9}, {3.5, 3.5, 3.5}, {3.1, 3.9, 3.2}};
  ModelParams<double> p(2);
  DvfeConfig cfg;
  init_dvfe(p, "dvfe", cfg);
  Graph<double> g;
  nn::Context<double> ctx{g, p, true};
  auto r = dvfe_forward(ctx, c, unit_grid(), AugmentFlags{}, cfg, "dvfe");
  EXPECT_EQ(r.vmap.num_voxels(), 3u);
  EXPECT_EQ(r.out.voxel_features.rows(), 3u);
  EXPECT_EQ(r.out.voxel_features.cols(), 64u);
}

TEST(DvfeTest, CoordinatesOnlyInput) {
  std::mt19937_64 rng(3);
  auto c = random_cloud(rng, 50, 3.9);
  ModelParams<double> p(3);
  DvfeConfig cfg;
  cfg.in_channels = 3;
  init_dvfe(p, "dvfe", cfg);
  Graph<double> g;
  nn::Context<double> ctx{g, p, true};
  auto r = dvfe_forward(ctx, c, unit_grid(), AugmentFlags{false, false, false}, cfg, "dvfe");
  EXPECT_EQ(r.out.voxel_features.cols(), 64u);
  DvfeConfig wrong;
  EXPECT_THROW(dvfe_forward(ctx, c, unit_grid(), AugmentFlags{false, false, false}, wrong, "dvfe"), std::exception);
}

TEST(DvfeTest, PermutationInvarianceProperty) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    auto c = random_cloud(rng, 120, 3.9);
    std::vector<std::int64_t> perm(c.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto pc = c.subset(perm);
    ModelParams<double> p(4);
    DvfeConfig cfg;
    init_dvfe(p, "dvfe", cfg);
    Graph<double> g;
    // eval mode: batch statistics would otherwise differ only by summation order
    nn::Context<double> ctx{g, p, false};
    auto a = dvfe_forward(ctx, c, unit_grid(), AugmentFlags{}, cfg, "dvfe");
    auto b = dvfe_forward(ctx, pc, unit_grid(), AugmentFlags{}, cfg, "dvfe");
    const auto& va = a.out.voxel_features.value();
    const auto& vb = b.out.voxel_features.value();
    ASSERT_EQ(va.size(), vb.size());
    // centroid sums depend on order at the last bit
    for (std::size_t i = 0; i < va.size(); ++i) EXPECT_NEAR(va[i], vb[i], 1e-12);
  }
}

TEST(DvfeTest, EndToEndGradCheck) {
  // 10 points in 3 voxels
  LabeledCloud c;
  c.coords = {{0.1, 0.2, 0.3}, {0.6, 0.4, 0.2}, {0.3, 0.8, 0.9}, {0.7, 0.7, 0.1}, {1.2, 0.3, 0.4},
              {1.8, 0.6, 0.5}, {1.5, 0.1, 0.9}, {2.2, 2.4, 0.3}, {2.9, 2.1, 0.8}, {2.5, 2.5, 0.5}};
  auto m = dynamic_voxelize(c, unit_grid());
  ASSERT_EQ(m.num_voxels(), 3u);
  DvfeConfig cfg;
  cfg.mid_channels = 6;
  cfg.out_channels = 5;
  ModelParams<double> p(5);
  init_dvfe(p, "dvfe", cfg);
  auto feats = augment_features<double>(c, m, unit_grid(), AugmentFlags{});
  const auto vi = VoxelIndex::from(m);
  std::map<std::string, Tensor<double>> buffers;
  for (auto& [name, param] : p)
    if (!param.trainable) buffers[name] = param.value;
  auto r = grad_check_params([&](Graph<double>& g) {
    for (auto& [name, v] : buffers) p.at(name).value = v;
    nn::Context<double> ctx{g, p, true};
    return probe(dvfe_encode(ctx, g.constant(feats.values), vi, cfg, "dvfe").voxel_features);
  }, p);
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(DvfeTest, MaxRoutingConservesGradient) {
  std::mt19937_64 rng(6);
  auto c = random_cloud(rng, 40, 1.9);
  auto m = dynamic_voxelize(c, unit_grid());
  ModelParams<double> p(6);
  nn::init_fcn(p, "v", 9, 4);
  Graph<double> g;
  auto f = augment_features<double>(c, m, unit_grid(), AugmentFlags{});
  auto h = g.leaf(f.values);
  auto vox = ag::segment_reduce(h, m.voxel_to_points, Reduce::max);
  g.backward(probe(vox));
  // recover voxel gradient by a second pass through a leaf
  Graph<double> g2;
  auto vleaf = g2.leaf(vox.value());
  g2.backward(probe(vleaf));
  for (std::size_t v = 0; v < m.num_voxels(); ++v)
    for (std::size_t j = 0; j < 9; ++j) {
      double s = 0;
      std::size_t nonzero = 0;
      for (auto i : m.voxel_to_points[v]) {
        s += g.grad(h)(static_cast<std::size_t>(i), j);
        nonzero += g.grad(h)(static_cast<std::size_t>(i), j) != 0.0;
      }
      EXPECT_NEAR(s, g2.grad(vleaf)(v, j), 1e-15);
      EXPECT_LE(nonzero, 1u);
    }
}

TEST(DvfeTest, DynamicKeepsEveryPointInfluential) {
  // Perturbing a point that hard voxelization with Y=1 would drop still changes F^V.
  LabeledCloud c;
  c.coords = {{0.2, 0.2, 0.2}, {0.8, 0.8, 0.8}};
  auto hv = hard_voxelize(c, unit_grid(), 1, 3);
  std::size_t dropped = hv.point_to_voxel[0] == kDropped ? 0 : 1;
  ModelParams<double> p(7);
  DvfeConfig cfg;
  init_dvfe(p, "dvfe", cfg);
  auto run = [&](const LabeledCloud& cl) {
    Graph<double> g;
    nn::Context<double> ctx{g, p, false};
    return dvfe_forward(ctx, cl, unit_grid(), AugmentFlags{}, cfg, "dvfe").out.voxel_features.value();
  };
  auto base = run(c);
  auto moved = c;
  moved.coords[dropped][0] -= 0.1;
  EXPECT_NE(run(moved).storage(), base.storage());
}

}  // namespace
}  // namespace podseg
