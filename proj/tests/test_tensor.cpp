#include <gtest/gtest.h>

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "podseg/params.hpp"
#include "podseg/reduce.hpp"
#include "podseg/tensor.hpp"

namespace podseg {
namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("podseg_" + name)).string();
}

TEST(TensorTest, ShapeAndAccess) {
  Tensor<float> t(2, 3, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  t(1, 2) = 4.0f;
  EXPECT_FLOAT_EQ(t[5], 4.0f);
  EXPECT_THROW(Tensor<float>::from_rows(2, 2, {1, 2, 3}), ShapeError);
}

TEST(TensorTest, MatmulAgainstNaiveLoop) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  const std::size_t n = 5, k = 7, m = 4;
  Tensor<double> a(n, k), b(k, m), out(n, m);
  for (auto& v : a.storage()) v = u(rng);
  for (auto& v : b.storage()) v = u(rng);
  kernels::matmul(a.data(), b.data(), out.data(), n, k, m, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(p, j);
      EXPECT_NEAR(out(i, j), s, 1e-12);
    }
}

TEST(ReduceTest, MaxMeanSumWithArgmax) {
  auto in = Tensor<float>::from_rows(3, 1, {1, 5, 3});
  Groups groups{{0, 1}, {2}};
  std::vector<std::int64_t> argmax;
  auto mx = kernels::segment_reduce(in, groups, Reduce::max, &argmax);
  EXPECT_FLOAT_EQ(mx[0], 5);
  EXPECT_FLOAT_EQ(mx[1], 3);
  EXPECT_EQ(argmax[0], 1);
  EXPECT_EQ(argmax[1], 2);
  auto mean = kernels::segment_reduce(in, groups, Reduce::mean);
  EXPECT_FLOAT_EQ(mean[0], 3);
  EXPECT_FLOAT_EQ(mean[1], 3);
  auto sum = kernels::segment_reduce(in, groups, Reduce::sum);
  EXPECT_FLOAT_EQ(sum[0], 6);
}

TEST(ReduceTest, MaxTieGoesToLowestIndex) {
  auto in = Tensor<float>::from_rows(3, 1, {2, 2, 2});
  std::vector<std::int64_t> argmax;
  kernels::segment_reduce(in, Groups{{0, 1, 2}}, Reduce::max, &argmax);
  EXPECT_EQ(argmax[0], 0);
}

TEST(ReduceTest, UnsupportedModeRejected) {
  EXPECT_THROW(parse_reduce("median"), std::invalid_argument);
  EXPECT_EQ(parse_reduce("max"), Reduce::max);
}

TEST(ParamsTest, DenseInitIsSeeded) {
  ModelParams<float> a(7), b(7), c(8);
  a.add_dense("fc", 4, 3);
  b.add_dense("fc", 4, 3);
  c.add_dense("fc", 4, 3);
  EXPECT_EQ(a.at("fc.weight").value.storage(), b.at("fc.weight").value.storage());
  EXPECT_NE(a.at("fc.weight").value.storage(), c.at("fc.weight").value.storage());
  for (float v : a.at("fc.bias").value.values()) EXPECT_EQ(v, 0.0f);
}

TEST(ParamsTest, DuplicateNameRejected) {
  ModelParams<float> p;
  p.add("x", {1, 1});
  EXPECT_THROW(p.add("x", {1, 1}), std::invalid_argument);
}

TEST(ParamsTest, FreezeByPrefix) {
  ModelParams<float> p;
  p.add_dense("pst.fc", 2, 2);
  p.add_dense("ins.fc", 2, 2);
  p.set_frozen("pst", true);
  EXPECT_TRUE(p.is_frozen("pst.fc.weight"));
  EXPECT_FALSE(p.is_frozen("ins.fc.weight"));
  p.set_frozen("pst", false);
  EXPECT_FALSE(p.is_frozen("pst.fc.weight"));
}

TEST(CheckpointTest, BitExactRoundTrip) {
  ModelParams<float> p(11);
  p.add_dense("a", 3, 5);
  p.add("b.running_var", {1, 5}, 1.0f, false);
  p.at("a.weight").value[0] = -0.0f;
  p.at("a.weight").value[1] = 1e-38f;
  const auto path = temp_path("ckpt_roundtrip.bin");
  write_checkpoint(path, to_named(p));
  auto back = read_checkpoint(path);
  ModelParams<float> q(0);
  q.add_dense("a", 3, 5);
  q.add("b.running_var", {1, 5}, 0.0f, false);
  load_named(q, back);
  for (const auto& [name, param] : p) {
    const auto& x = param.value.storage();
    const auto& y = q.at(name).value.storage();
    ASSERT_EQ(x.size(), y.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(x[i]), std::bit_cast<std::uint32_t>(y[i])) << name;
  }
  std::remove(path.c_str());
}

TEST(CheckpointTest, MagicAndLayout) {
  const auto path = temp_path("ckpt_layout.bin");
  Tensor<float> t(1, 2);
  t[0] = 1.0f;
  t[1] = -2.0f;
  write_checkpoint(path, {{"w", t}});
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  // magic(8) + len(4) + "w"(1) + rank(4) + dims(8) + values(8)
  ASSERT_EQ(bytes.size(), 33u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "PSTCKPT1");
  EXPECT_EQ(bytes[8], 1u);
  EXPECT_EQ(bytes[12], 'w');
  EXPECT_EQ(bytes[13], 2u);
  // 1.0f little-endian
  EXPECT_EQ(bytes[25], 0x00);
  EXPECT_EQ(bytes[28], 0x3f);
  std::remove(path.c_str());
}

TEST(CheckpointTest, ShapeMismatchRejected) {
  ModelParams<float> p;
  p.add_dense("a", 3, 5);
  ModelParams<float> q;
  q.add_dense("a", 3, 4);
  EXPECT_THROW(load_named(q, to_named(p)), CheckpointError);
}

TEST(CheckpointTest, BadMagicRejected) {
  const auto path = temp_path("ckpt_bad.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  std::remove(path.c_str());
}

}  // namespace
}  // namespace podseg
