#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "podseg/gradcheck.hpp"
#include "podseg/instance.hpp"

namespace podseg {
namespace {

Var<double> probe(Var<double> y, std::uint64_t seed = 23) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<double> w(y.rows(), y.cols());
  for (auto& v : w.storage()) v = u(rng);
  return ag::sum_all(ag::mul(y, y.graph->constant(w)));
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("podseg_inst_" + name)).string();
}

TEST(OffsetBranchTest, ZeroWeightsGiveZeroOffsets) {
  ModelParams<double> p(1);
  init_offset_branch(p, "ins.offset", 8, 6);
  for (auto& [name, param] : p) param.value.fill(0.0);
  Graph<double> g;
  nn::Context<double> ctx{g, p, false};
  Tensor<double> x(5, 8, 0.3);
  const auto& os = offset_branch(ctx, g.constant(x), "ins.offset").value();
  EXPECT_EQ(os.rows(), 5u);
  EXPECT_EQ(os.cols(), 3u);
  for (double v : os.storage()) EXPECT_EQ(v, 0.0);
  std::vector<Vec3> pts{{0.1, 0.2, 0.3}, {1, 1, 1}, {0, 0, 0}, {2, 3, 4}, {-1, 0, 1}};
  EXPECT_EQ(shifted_coords(pts, os), pts);
}

TEST(OffsetBranchTest, GradCheck) {
  ModelParams<double> p(2);
  init_offset_branch(p, "ins.offset", 4, 5);
  std::mt19937_64 rng(2);
  Tensor<double> x(6, 4);
  for (auto& v : x.storage()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto r = grad_check_params([&](Graph<double>& g) {
    nn::Context<double> ctx{g, p, true};
    return probe(offset_branch(ctx, g.constant(x), "ins.offset"));
  }, p);
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

OffsetLosses<double> losses_for(Graph<double>& g, Vec3 os, Vec3 target) {
  auto t = std::make_shared<const Tensor<double>>(Tensor<double>::from_rows(1, 3, {target[0], target[1], target[2]}));
  auto m = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1});
  return offset_losses(g.constant(Tensor<double>::from_rows(1, 3, {os[0], os[1], os[2]})), t, m);
}

TEST(OffsetLossTest, Examples) {
  Graph<double> g;
  auto half = losses_for(g, {0.5, 0, 0}, {1, 0, 0});
  EXPECT_NEAR(half.reg.value()[0], 0.5, 1e-15);
  EXPECT_NEAR(half.dir.value()[0], -1.0, 1e-12);
  auto exact = losses_for(g, {1, 0, 0}, {1, 0, 0});
  EXPECT_NEAR(exact.reg.value()[0], 0.0, 1e-15);
  EXPECT_NEAR(exact.dir.value()[0], -1.0, 1e-12);
  auto opposite = losses_for(g, {-0.3, 0, 0}, {1, 0, 0});
  EXPECT_NEAR(opposite.dir.value()[0], 1.0, 1e-12);
}

TEST(OffsetLossTest, CentroidTargets) {
  std::vector<Vec3> p{{0, 0, 0}, {2, 0, 0}, {5, 5, 5}, {1, 1, 1}};
  auto [t, mask] = centroid_targets(p, {0, 0, kNoInstance, 3});
  EXPECT_EQ(mask, (std::vector<std::uint8_t>{1, 1, 0, 1}));
  EXPECT_EQ(t(0, 0), 1.0);
  EXPECT_EQ(t(1, 0), -1.0);
  EXPECT_EQ(t(3, 0), 0.0);
}

// Brute-force transitive closure of the same-class <= r relation.
std::set<IndexList> closure_oracle(const std::vector<Vec3>& p, const std::vector<int>& sem, double r,
                                   std::size_t min_points) {
  const std::size_t n = p.size();
  std::vector<int> comp(n, -1);
  int next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (sem[s] != kSilique || comp[s] >= 0) continue;
    std::vector<std::size_t> stack{s};
    comp[s] = next;
    while (!stack.empty()) {
      auto i = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < n; ++j) {
        if (comp[j] >= 0 || sem[j] != sem[i]) continue;
        double d2 = 0;
        for (int a = 0; a < 3; ++a) d2 += (p[i][a] - p[j][a]) * (p[i][a] - p[j][a]);
        if (d2 <= r * r) {
          comp[j] = next;
          stack.push_back(j);
        }
      }
    }
    ++next;
  }
  std::vector<IndexList> groups(static_cast<std::size_t>(next));
  for (std::size_t i = 0; i < n; ++i)
    if (comp[i] >= 0) groups[static_cast<std::size_t>(comp[i])].push_back(static_cast<std::int64_t>(i));
  std::set<IndexList> out;
  for (auto& g : groups)
    if (g.size() >= min_points) out.insert(g);
  return out;
}

TEST(ClusterTest, OneDimensionalExample) {
  std::vector<Vec3> p{{0, 0, 0}, {0.5, 0, 0}, {3, 0, 0}};
  std::vector<int> sem(3, kSilique);
  auto c1 = cluster_points(p, sem, 1.0, 1);
  ASSERT_EQ(c1.size(), 2u);
  EXPECT_EQ(c1[0].members, (IndexList{0, 1}));
  EXPECT_EQ(c1[1].members, (IndexList{2}));
  EXPECT_EQ(cluster_points(p, sem, 1.0, 2).size(), 1u);
}

TEST(ClusterTest, ClassesNeverMerge) {
  std::vector<Vec3> p;
  std::vector<int> sem;
  for (int i = 0; i < 20; ++i) {
    p.push_back({0.001 * i, 0, 0});
    sem.push_back(i % 2);
  }
  auto c = cluster_points(p, sem, 0.0025, 1, {});
  ASSERT_EQ(c.size(), 2u);
  for (const auto& cl : c)
    for (auto i : cl.members) EXPECT_EQ(sem[static_cast<std::size_t>(i)], cl.sem_class);
}

TEST(ClusterTest, SmallClusterDiscarded) {
  std::vector<Vec3> p{{0, 0, 0}, {0.001, 0, 0}, {0.002, 0, 0}};
  EXPECT_TRUE(cluster_points(p, {1, 1, 1}, 0.01, 5).empty());
}

TEST(ClusterTest, NonSiliqueMaskedByDefault) {
  std::vector<Vec3> p{{0, 0, 0}, {0.001, 0, 0}, {0.002, 0, 0}};
  EXPECT_TRUE(cluster_points(p, {0, 0, 0}, 0.01, 1).empty());
}

TEST(ClusterTest, MatchesBruteForceClosureProperty) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 20 + rng() % 181;
    std::vector<Vec3> p(n);
    std::vector<int> sem(n);
    std::uniform_real_distribution<double> u(0, 0.1);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = {u(rng), u(rng), u(rng) * 0.3};
      sem[i] = rng() % 4 == 0 ? kNonSilique : kSilique;
    }
    const double r = std::uniform_real_distribution<double>(0.005, 0.02)(rng);
    const std::size_t min_points = 1 + rng() % 4;
    auto got = cluster_points(p, sem, r, min_points);
    std::set<IndexList> got_set;
    std::vector<int> seen(n, 0);
    for (const auto& c : got) {
      got_set.insert(c.members);
      for (auto i : c.members) ++seen[static_cast<std::size_t>(i)];
    }
    for (int s : seen) EXPECT_LE(s, 1);
    EXPECT_EQ(got_set, closure_oracle(p, sem, r, min_points)) << "trial " << trial;
    for (std::size_t k = 1; k < got.size(); ++k) EXPECT_LT(got[k - 1].members[0], got[k].members[0]);
  }
}

// Two touching rods along x; each point's oracle offset moves it to its rod centroid.
struct TwoRods {
  std::vector<Vec3> p;
  std::vector<int> sem, inst;
};

TwoRods two_rods() {
  TwoRods f;
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < 30; ++i) {
      f.p.push_back({0.002 * i + 0.061 * k, 0, 0});
      f.sem.push_back(kSilique);
      f.inst.push_back(k);
    }
  return f;
}

TEST(DualSetClusterTest, ZeroOffsetsDuplicateOriginalSpace) {
  auto f = two_rods();
  InstanceHeadConfig cfg;
  auto props = dual_set_cluster(f.p, f.p, f.sem, cfg);
  ASSERT_EQ(props.size() % 2, 0u);
  const std::size_t half = props.size() / 2;
  for (std::size_t k = 0; k < half; ++k) {
    EXPECT_EQ(props[k].space, Space::original);
    EXPECT_EQ(props[k + half].space, Space::shifted);
    EXPECT_EQ(props[k].members, props[k + half].members);
  }
}

TEST(DualSetClusterTest, OracleOffsetsSplitAbuttingInstances) {
  auto f = two_rods();
  InstanceHeadConfig cfg;
  auto [t, mask] = centroid_targets(f.p, f.inst);
  auto ps = shifted_coords(f.p, t);
  auto props = dual_set_cluster(f.p, ps, f.sem, cfg);
  std::vector<InstanceProposal> orig, shifted;
  for (auto& pr : props) (pr.space == Space::original ? orig : shifted).push_back(pr);
  ASSERT_EQ(orig.size(), 1u);
  EXPECT_EQ(orig[0].members.size(), 60u);
  ASSERT_EQ(shifted.size(), 2u);
  EXPECT_EQ(shifted[0].members.size(), 30u);
  EXPECT_EQ(shifted[1].members.size(), 30u);
  auto gt = instances_of(f.inst);
  EXPECT_EQ(shifted[0].members, gt[0]);
  EXPECT_EQ(shifted[1].members, gt[1]);
}

TEST(DualSetClusterTest, NoSiliquesNoProposals) {
  auto f = two_rods();
  std::vector<int> sem(f.p.size(), kNonSilique);
  EXPECT_TRUE(dual_set_cluster(f.p, f.p, sem, InstanceHeadConfig{}).empty());
}

std::vector<InstanceProposal> rod_proposals() {
  return {{{0, 1, 2, 3, 4}, Space::original, kSilique, 0}, {{2, 3, 4, 5, 6, 7}, Space::shifted, kSilique, 0}};
}

std::vector<Vec3> rod_coords() {
  std::vector<Vec3> p;
  for (int i = 0; i < 8; ++i) p.push_back({0.01 * i, 0.003 * (i % 3), 0.002 * i});
  return p;
}

TEST(ScoreNetTest, ZeroFinalLayerGivesHalf) {
  ModelParams<double> p(3);
  init_score_net(p, "ins.score", 6, 4);
  p.at("ins.score.out.weight").value.fill(0.0);
  p.at("ins.score.out.bias").value.fill(0.0);
  Graph<double> g;
  nn::Context<double> ctx{g, p, false};
  auto props = rod_proposals();
  score_clusters(ctx, g.constant(Tensor<double>(8, 6, 0.2)), rod_coords(), props, "ins.score");
  for (const auto& pr : props) EXPECT_EQ(pr.score, 0.5);
}

TEST(ScoreNetTest, ScoresInOpenUnitIntervalProperty) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams<double> p(100 + trial);
    init_score_net(p, "ins.score", 6, 4);
    Tensor<double> gt(8, 6);
    for (auto& v : gt.storage()) v = std::uniform_real_distribution<double>(-3, 3)(rng);
    Graph<double> g;
    nn::Context<double> ctx{g, p, false};
    auto props = rod_proposals();
    score_clusters(ctx, g.constant(gt), rod_coords(), props, "ins.score");
    for (const auto& pr : props) {
      EXPECT_GT(pr.score, 0.0);
      EXPECT_LT(pr.score, 1.0);
    }
  }
}

TEST(ScoreNetTest, ScoreLossGradCheck) {
  ModelParams<double> p(5);
  init_score_net(p, "ins.score", 6, 4);
  std::mt19937_64 rng(5);
  Tensor<double> feats(8, 6);
  for (auto& v : feats.storage()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  std::vector<int> inst{0, 0, 0, 0, 1, 1, 1, 1};
  auto props = rod_proposals();
  InstanceHeadConfig cfg;
  auto build = [&](Graph<double>& g, Var<double> x) {
    nn::Context<double> ctx{g, p, true};
    return score_loss(score_logits(ctx, x, rod_coords(), props, "ins.score"), props, inst, cfg);
  };
  auto r = grad_check([&](Graph<double>& g, const std::vector<Var<double>>& l) { return build(g, l[0]); }, {&feats});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
  auto rp = grad_check_params([&](Graph<double>& g) { return build(g, g.constant(feats)); }, p);
  EXPECT_TRUE(rp.passed) << rp.worst << " err " << rp.max_rel_error;
}

TEST(ScoreTargetTest, Examples) {
  InstanceHeadConfig cfg;
  std::vector<int> inst{0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<InstanceProposal> props{{{0, 1, 2, 3}, Space::original, 1, 0},
                                      {{4, 5}, Space::original, 1, 0},
                                      {{0, 1, 2, 3, 4, 5, 6, 7}, Space::original, 1, 0}};
  auto t = score_targets(props, inst, cfg);
  EXPECT_EQ(t[0], 1.0);
  EXPECT_EQ(t[1], 0.5);  // IoU 2/4
  EXPECT_EQ(t[2], 0.5);
  std::vector<int> none(8, kNoInstance);
  EXPECT_EQ(score_targets(props, none, cfg)[0], 0.0);
  EXPECT_EQ(score_target(0.1, cfg), 0.0);
  EXPECT_EQ(score_target(0.9, cfg), 1.0);
}

TEST(NmsTest, Examples) {
  IndexList a, b;
  for (int i = 0; i < 10; ++i) a.push_back(i);
  for (int i = 1; i < 9; ++i) b.push_back(i);
  ASSERT_NEAR(set_iou(a, b), 0.8, 1e-15);
  std::vector<InstanceProposal> overlapping{{a, Space::original, 1, 0.9}, {b, Space::shifted, 1, 0.7}};
  EXPECT_EQ(nms(overlapping, 0.3), (std::vector<std::size_t>{0}));
  std::vector<InstanceProposal> swapped{{b, Space::original, 1, 0.7}, {a, Space::shifted, 1, 0.9}};
  EXPECT_EQ(nms(swapped, 0.3), (std::vector<std::size_t>{1}));
  std::vector<InstanceProposal> disjoint{{{0, 1}, Space::original, 1, 0.2}, {{2, 3}, Space::original, 1, 0.4}};
  EXPECT_EQ(nms(disjoint, 0.3), (std::vector<std::size_t>{1, 0}));
  std::vector<InstanceProposal> tied{{a, Space::original, 1, 0.5}, {b, Space::shifted, 1, 0.5}};
  EXPECT_EQ(nms(tied, 0.3), (std::vector<std::size_t>{0}));
}

TEST(NmsTest, KeptPairwiseIoUBoundedProperty) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<InstanceProposal> props;
    for (int k = 0; k < 12; ++k) {
      const auto lo = static_cast<std::int64_t>(rng() % 40), len = static_cast<std::int64_t>(1 + rng() % 20);
      IndexList m;
      for (auto i = lo; i < lo + len; ++i) m.push_back(i);
      props.push_back({m, Space::original, 1, std::uniform_real_distribution<double>(0, 1)(rng)});
    }
    const double thr = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    auto kept = nms(props, thr);
    EXPECT_FALSE(kept.empty());
    for (std::size_t x = 0; x < kept.size(); ++x)
      for (std::size_t y = x + 1; y < kept.size(); ++y)
        EXPECT_LE(set_iou(props[kept[x]].members, props[kept[y]].members), thr);
  }
}

TEST(AssignTest, HigherScoreClaimsSharedPoints) {
  std::vector<InstanceProposal> props{{{0, 1, 2}, Space::original, 1, 0.4}, {{2, 3}, Space::original, 1, 0.8}};
  auto a = assign_instances(5, props, {1, 0});
  EXPECT_EQ(a.inst, (std::vector<int>{1, 1, 0, 0, kNoInstance}));
  EXPECT_EQ(a.score[4], 0.0);
  EXPECT_EQ(a.score[2], 0.8);
}

TEST(ScheduleTest, VariantCases) {
  InstanceHeadConfig cfg;
  auto v_prep = train_schedule(Variant::v_pst_pg, cfg.prep_epoch, cfg);
  EXPECT_EQ(v_prep.loss_count(), 3);
  EXPECT_FALSE(v_prep.score);
  auto v_after = train_schedule(Variant::v_pst_pg, cfg.prep_epoch + 1, cfg);
  EXPECT_EQ(v_after.loss_count(), 4);
  EXPECT_FALSE(v_after.freeze_pst);
  auto f_prep = train_schedule(Variant::f_pst_pg, cfg.prep_epoch, cfg);
  EXPECT_EQ(f_prep.loss_count(), 3);
  EXPECT_FALSE(f_prep.freeze_pst);
  auto f_after = train_schedule(Variant::f_pst_pg, cfg.prep_epoch + 1, cfg);
  EXPECT_EQ(f_after.loss_count(), 3);
  EXPECT_FALSE(f_after.sem);
  EXPECT_TRUE(f_after.freeze_pst);
  EXPECT_EQ(train_schedule(Variant::pst, 100, cfg).loss_count(), 1);
  EXPECT_THROW(train_schedule("W", 1, cfg), std::invalid_argument);
}

TEST(ScheduleTest, FrozenBackboneReceivesNoGradient) {
  ModelParams<double> p(7);
  nn::init_mlp(p, "pst.head", 4, 5, 6);
  init_offset_branch(p, "ins.offset", 6, 5);
  InstanceHeadConfig cfg;
  auto s = train_schedule(Variant::f_pst_pg, cfg.prep_epoch + 1, cfg);
  p.set_frozen("pst", s.freeze_pst);
  Graph<double> g;
  nn::Context<double> ctx{g, p, true};
  auto x = g.constant(Tensor<double>(3, 4, 0.7));
  auto os = offset_branch(ctx, nn::mlp_apply(ctx, x, "pst.head"), "ins.offset");
  p.zero_grad();
  g.backward(probe(os));
  double ins_norm = 0;
  for (auto& [name, param] : p) {
    if (name.rfind("pst", 0) == 0)
      for (double v : param.grad.storage()) EXPECT_EQ(v, 0.0) << name;
    else
      for (double v : param.grad.storage()) ins_norm += std::abs(v);
  }
  EXPECT_GT(ins_norm, 0.0);
}

TEST(ShiftDiagnosticsTest, RoundTripAndLineCount) {
  std::mt19937_64 rng(8);
  std::vector<Vec3> p(25), ps(25);
  std::vector<int> sem(25);
  for (std::size_t i = 0; i < 25; ++i) {
    for (int a = 0; a < 3; ++a) {
      p[i][a] = std::uniform_real_distribution<double>(-1, 1)(rng);
      ps[i][a] = p[i][a] + std::uniform_real_distribution<double>(-1e-3, 1e-3)(rng);
    }
    sem[i] = static_cast<int>(rng() % 2);
  }
  const auto path = temp_path("shift.txt");
  export_shift_diagnostics(p, ps, sem, path);
  std::ifstream is(path);
  std::size_t lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  EXPECT_EQ(lines, 2 * 25u + 1);
  auto d = read_shift_diagnostics(path);
  EXPECT_EQ(d.original, p);
  EXPECT_EQ(d.shifted, ps);
  EXPECT_EQ(d.sem, sem);
  export_shift_diagnostics(p, p, sem, path);
  auto same = read_shift_diagnostics(path);
  EXPECT_EQ(same.original, same.shifted);
  std::remove(path.c_str());
}

TEST(ShiftDiagnosticsTest, UnwritablePathThrows) {
  std::vector<Vec3> p{{0, 0, 0}};
  EXPECT_THROW(export_shift_diagnostics(p, p, {1}, "/nonexistent_dir/x/shift.txt"), std::runtime_error);
}

}  // namespace
}  // namespace podseg
