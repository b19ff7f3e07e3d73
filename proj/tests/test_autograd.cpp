#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "podseg/autograd.hpp"
#include "podseg/gradcheck.hpp"

namespace podseg {
namespace {

Tensor<double> random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(r, c);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

// sum(y .* w) for a fixed random w, so every output element gets its own weight.
Var<double> probe(Var<double> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ag::sum_all(ag::mul(y, y.graph->constant(random_tensor(y.rows(), y.cols(), rng))));
}

TEST(AutogradTest, LinearGradCheck) {
  std::mt19937_64 rng(1);
  auto x = random_tensor(5, 4, rng), w = random_tensor(4, 3, rng), b = random_tensor(1, 3, rng);
  auto r = grad_check([](Graph<double>&, std::vector<Var<double>>& v) { return probe(ag::linear(v[0], v[1], v[2])); },
                      {&x, &w, &b});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(AutogradTest, SoftmaxCrossEntropyCompositeGradCheck) {
  std::mt19937_64 rng(2);
  auto z = random_tensor(6, 3, rng, -2, 2);
  auto labels = std::make_shared<const std::vector<int>>(std::vector<int>{0, 2, 1, 1, 0, 2});
  auto r = grad_check([&](Graph<double>&, std::vector<Var<double>>& v) {
    return ag::nll_probs(ag::softmax_rows(v[0]), labels);
  }, {&z});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
  auto r2 = grad_check([&](Graph<double>&, std::vector<Var<double>>& v) {
    return ag::cross_entropy_logits(v[0], labels);
  }, {&z});
  EXPECT_TRUE(r2.passed) << r2.worst << " err " << r2.max_rel_error;
}

TEST(AutogradTest, CorruptedBackwardFailsCheck) {
  std::mt19937_64 rng(3);
  auto x = random_tensor(4, 3, rng);
  auto r = grad_check([](Graph<double>& g, std::vector<Var<double>>& v) {
    Var<double> y = ag::scale(v[0], 2.0);
    // Same forward value, backward deliberately scaled by 1.5.
    Var<double> bad = g.emit(y.value(), true);
    g.set_backward(bad, [&g, y](const Tensor<double>& go) {
      auto& gy = g.grad(y);
      for (std::size_t i = 0; i < go.size(); ++i) gy[i] += 1.5 * go[i];
    });
    return probe(bad);
  }, {&x});
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(AutogradTest, ElementwiseOpsGradCheck) {
  std::mt19937_64 rng(4);
  auto a = random_tensor(4, 5, rng), b = random_tensor(4, 3, rng);
  // keep relu/ kink away from the probe step
  for (auto& v : a.storage())
    if (std::abs(v) < 1e-3) v = 0.5;
  auto r = grad_check([](Graph<double>&, std::vector<Var<double>>& v) {
    Var<double> h = ag::concat_cols(ag::relu(v[0]), ag::sigmoid(v[1]));
    return probe(ag::add(ag::scale(h, 0.7), ag::mul(h, h)));
  }, {&a, &b});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(AutogradTest, GatherAndSegmentReduceGradCheck) {
  std::mt19937_64 rng(5);
  auto a = random_tensor(6, 3, rng);
  const Groups groups{{0, 2}, {1, 3, 4}, {5}};
  const IndexList index{2, 0, -1, 1, 1};
  for (Reduce mode : {Reduce::max, Reduce::mean, Reduce::sum}) {
    auto r = grad_check([&](Graph<double>&, std::vector<Var<double>>& v) {
      return probe(ag::gather_rows(ag::segment_reduce(v[0], groups, mode), index));
    }, {&a});
    EXPECT_TRUE(r.passed) << to_string(mode) << " " << r.worst << " err " << r.max_rel_error;
  }
}

TEST(AutogradTest, MaxReduceRoutesGradientToArgmaxOnly) {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::from_rows(3, 2, {1, 9, 5, 2, 3, 4}));
  auto y = ag::segment_reduce(x, Groups{{0, 1, 2}}, Reduce::max);
  g.backward(ag::sum_all(ag::scale(y, 3.0)));
  const auto& gx = g.grad(x);
  EXPECT_DOUBLE_EQ(gx(1, 0), 3.0);
  EXPECT_DOUBLE_EQ(gx(0, 1), 3.0);
  double total = 0;
  for (double v : gx.values()) total += v;
  EXPECT_DOUBLE_EQ(total, 6.0);
}

TEST(AutogradTest, LayerNormForward) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>::from_rows(2, 2, {1, 3, 5, 5}));
  auto y = ag::layer_norm(x, g.constant(Tensor<double>(1, 2, 1.0)), g.constant(Tensor<double>(1, 2, 0.0)), 1e-12);
  EXPECT_NEAR(y.value()(0, 0), -1.0, 1e-9);
  EXPECT_NEAR(y.value()(0, 1), 1.0, 1e-9);
  EXPECT_DOUBLE_EQ(y.value()(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(y.value()(1, 1), 0.0);
}

TEST(AutogradTest, LayerNormGradCheck) {
  std::mt19937_64 rng(6);
  auto x = random_tensor(5, 6, rng), gain = random_tensor(1, 6, rng), bias = random_tensor(1, 6, rng);
  auto r = grad_check([](Graph<double>&, std::vector<Var<double>>& v) {
    return probe(ag::layer_norm(v[0], v[1], v[2], 1e-5));
  }, {&x, &gain, &bias});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(AutogradTest, BatchNormTrainingGradCheck) {
  std::mt19937_64 rng(7);
  auto x = random_tensor(8, 4, rng), gamma = random_tensor(1, 4, rng), beta = random_tensor(1, 4, rng);
  Param<double> rm, rv;
  rm.value = Tensor<double>(1, 4, 0.0);
  rv.value = Tensor<double>(1, 4, 1.0);
  auto r = grad_check([&](Graph<double>&, std::vector<Var<double>>& v) {
    return probe(ag::batch_norm(v[0], v[1], v[2], rm, rv, true));
  }, {&x, &gamma, &beta});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(AutogradTest, BatchNormRunningStatistics) {
  Graph<double> g;
  Param<double> rm, rv;
  rm.value = Tensor<double>(1, 1, 0.0);
  rv.value = Tensor<double>(1, 1, 1.0);
  auto x = g.constant(Tensor<double>::from_rows(3, 1, {1, 2, 3}));
  ag::batch_norm(x, g.constant(Tensor<double>(1, 1, 1.0)), g.constant(Tensor<double>(1, 1, 0.0)), rm, rv, true);
  // mean 2, unbiased variance 1
  EXPECT_NEAR(rm.value[0], 0.2, 1e-12);
  EXPECT_NEAR(rv.value[0], 1.0, 1e-12);
  ag::batch_norm(x, g.constant(Tensor<double>(1, 1, 1.0)), g.constant(Tensor<double>(1, 1, 0.0)), rm, rv, false);
  EXPECT_NEAR(rm.value[0], 0.2, 1e-12);
}

TEST(AutogradTest, SoftmaxExamples) {
  Graph<double> g;
  auto p = ag::softmax_rows(g.constant(Tensor<double>::from_rows(3, 3, {1, 1, 1, 0, std::log(2.0), 0, 1000, 1000, 1000})));
  EXPECT_NEAR(p.value()(0, 0), 1.0 / 3, 1e-15);
  EXPECT_NEAR(p.value()(1, 1), 0.5, 1e-15);
  EXPECT_EQ(p.value()(2, 0), p.value()(0, 0));
  auto q = ag::softmax_rows(g.constant(Tensor<double>::from_rows(1, 2, {0, std::log(2.0)})));
  EXPECT_NEAR(q.value()[0], 1.0 / 3, 1e-15);
  EXPECT_NEAR(q.value()[1], 2.0 / 3, 1e-15);
}

TEST(AutogradTest, SoftmaxRowsSumToOneProperty) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> dim(1, 12);
    const auto r = static_cast<std::size_t>(dim(rng)), c = static_cast<std::size_t>(dim(rng));
    Graph<double> g;
    auto p = ag::softmax_rows(g.constant(random_tensor(r, c, rng, -50, 50)));
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(p.value()(i, j), 0.0);
        s += p.value()(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(AutogradTest, BceLogitsGradCheck) {
  std::mt19937_64 rng(9);
  auto z = random_tensor(5, 1, rng, -3, 3);
  auto t = std::make_shared<const std::vector<double>>(std::vector<double>{0, 1, 0.5, 0.2, 1});
  auto r = grad_check([&](Graph<double>&, std::vector<Var<double>>& v) { return ag::bce_logits(v[0], t); }, {&z});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(AutogradTest, OffsetLossesGradCheck) {
  std::mt19937_64 rng(10);
  auto o = random_tensor(6, 3, rng);
  auto target = std::make_shared<const Tensor<double>>(random_tensor(6, 3, rng));
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1, 0, 1});
  auto r = grad_check([&](Graph<double>&, std::vector<Var<double>>& v) {
    return ag::add(ag::offset_l1_loss(v[0], target, mask), ag::offset_dir_loss(v[0], target, mask));
  }, {&o});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(AutogradTest, WindowedAttentionGradCheck) {
  std::mt19937_64 rng(11);
  auto q = random_tensor(7, 4, rng), k = random_tensor(7, 4, rng), v = random_tensor(7, 4, rng);
  auto windows = std::make_shared<const Groups>(Groups{{0, 2, -1, 5}, {1, 3, 4, -1, -1}});
  auto r = grad_check([&](Graph<double>&, std::vector<Var<double>>& x) {
    return probe(ag::windowed_attention(x[0], x[1], x[2], windows, 2));
  }, {&q, &k, &v});
  EXPECT_TRUE(r.passed) << r.worst << " err " << r.max_rel_error;
}

TEST(AutogradTest, FrozenParamsReceiveNoGradient) {
  ModelParams<double> params(1);
  params.add_dense("a", 2, 2);
  params.add_dense("b", 2, 2);
  params.set_frozen("a", true);
  Graph<double> g;
  auto x = g.constant(Tensor<double>(3, 2, 1.0));
  auto h = ag::linear(x, g.param(params, "a.weight"), g.param(params, "a.bias"));
  auto y = ag::linear(h, g.param(params, "b.weight"), g.param(params, "b.bias"));
  g.backward(ag::sum_all(y));
  for (double v : params.at("a.weight").grad.values()) EXPECT_EQ(v, 0.0);
  double s = 0;
  for (double v : params.at("b.weight").grad.values()) s += std::abs(v);
  EXPECT_GT(s, 0.0);
}

}  // namespace
}  // namespace podseg
