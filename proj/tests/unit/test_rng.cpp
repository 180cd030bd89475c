#include <cmath>
#include <set>
#include <vector>

#include "gtest/gtest.h"

#include "dsqp/distributions.hpp"
#include "dsqp/rng.hpp"
#include "support.hpp"

using dsqp::Rng;

TEST(Rng, SameSeedSameSequence) {
  Rng a(17), b(17);
  for (int k = 0; k < 100; ++k) EXPECT_EQ(a(), b());
}

TEST(Rng, SubstreamsIgnoreParentConsumption) {
  Rng a(5), b(5);
  for (int k = 0; k < 37; ++k) b();
  Rng sa = a.substream({3, 4}), sb = b.substream({3, 4});
  for (int k = 0; k < 50; ++k) EXPECT_EQ(sa(), sb());
}

TEST(Rng, DistinctTagsGiveDistinctStreams) {
  Rng root(9);
  std::set<std::uint64_t> firsts;
  for (std::uint64_t t = 0; t < 1000; ++t) firsts.insert(root.substream(t)());
  EXPECT_EQ(firsts.size(), 1000u);
  EXPECT_NE(root.substream({1, 2})(), root.substream({2, 1})());
}

TEST(Rng, TauTagDependsOnValueOnly) {
  EXPECT_EQ(dsqp::tau_tag(0.05), dsqp::tau_tag(0.05));
  EXPECT_NE(dsqp::tau_tag(0.05), dsqp::tau_tag(0.95));
}

TEST(Rng, UniformIsOpenAndUniform) {
  Rng rng(11);
  std::vector<double> xs(100000);
  for (double& x : xs) {
    x = rng.uniform();
    ASSERT_GT(x, 0.0);
    ASSERT_LT(x, 1.0);
  }
  EXPECT_LT(dsqp::testing::ks_distance(xs, [](double x) { return x; }), 0.006);
}

TEST(Rng, NormalMatchesPhi) {
  Rng rng(12);
  std::vector<double> xs(100000);
  for (double& x : xs) x = rng.normal();
  EXPECT_LT(dsqp::testing::ks_distance(xs, dsqp::normal_cdf), 0.006);
}
