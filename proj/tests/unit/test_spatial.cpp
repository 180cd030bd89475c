#include <cmath>
#include <set>
#include <vector>

#include "gtest/gtest.h"

#include "dsqp/errors.hpp"
#include "dsqp/spatial.hpp"
#include "support.hpp"

using namespace dsqp;
using dsqp::testing::dense_m;
using dsqp::testing::ring_clusters;

namespace {

Eigen::VectorXd random_rho(int n, double scale, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXd rho(n);
  for (int i = 0; i < n; ++i) rho[i] = scale * (2 * rng.uniform() - 1);
  return rho;
}

}  // namespace

TEST(SpatialWeights, RejectsBadEntries) {
  EXPECT_THROW(SpatialWeights(3, {{0, 3, 1.0}}), DataError);
  EXPECT_THROW(SpatialWeights(3, {{1, 1, 0.5}}), DataError);
  EXPECT_THROW(SpatialWeights(3, {{0, 1, 0.5}, {0, 1, 0.5}}), DataError);
  EXPECT_THROW(SpatialWeights(3, {{0, 1, NAN}}), DataError);
  EXPECT_THROW(SpatialWeights(2, {{0, 1, 0.5}, {1, 0, 1.0}}, true), DataError);
  EXPECT_NO_THROW(SpatialWeights(2, {{0, 1, 1.0}, {1, 0, 1.0}}, true));
}

TEST(SpatialWeights, NormalizeRowsKeepsEdgesAndEmptyRows) {
  SpatialWeights w(3, {{0, 1, 2.0}, {0, 2, 6.0}, {1, 0, 3.0}});
  const auto nw = normalize_rows(w);
  EXPECT_NEAR(nw.to_dense()(0, 1), 0.25, 1e-15);
  EXPECT_NEAR(nw.to_dense()(1, 0), 1.0, 1e-15);
  EXPECT_EQ(nw.row_sums()[2], 0.0);
  EXPECT_EQ(nw.nnz(), 3);
  EXPECT_LE(nw.max_row_sum_deviation(), 1e-15);
}

TEST(SpatialWeights, BfsFindsPlantedComponents) {
  const std::vector<int> sizes = {7, 1, 12, 3, 1, 9};
  const auto w = bfs_blockalize(ring_clusters(sizes, 2, true, 4));
  ASSERT_EQ(w.n_blocks(), 6);
  std::multiset<int> got;
  for (const auto& b : w.blocks()) got.insert(static_cast<int>(b.size()));
  EXPECT_EQ(got, std::multiset<int>(sizes.begin(), sizes.end()));
  // Sorted by size descending, members ascending.
  for (int b = 1; b < w.n_blocks(); ++b) EXPECT_GE(w.blocks()[b - 1].size(), w.blocks()[b].size());
  const Eigen::MatrixXd d = w.to_dense();
  for (int b = 0; b < w.n_blocks(); ++b) {
    const auto& m = w.blocks()[b];
    EXPECT_TRUE(std::is_sorted(m.begin(), m.end()));
    for (std::size_t k = 0; k < m.size(); ++k) {
      EXPECT_EQ(w.block_of(m[k]), b);
      EXPECT_EQ(w.local_index(m[k]), static_cast<int>(k));
    }
  }
  // No weight crosses blocks.
  for (int i = 0; i < w.n(); ++i)
    for (int j = 0; j < w.n(); ++j)
      if (d(i, j) != 0) EXPECT_EQ(w.block_of(i), w.block_of(j));
  // Permutation is a bijection.
  std::vector<int> perm = w.permutation();
  std::sort(perm.begin(), perm.end());
  for (int k = 0; k < w.n(); ++k) EXPECT_EQ(perm[k], k);
}

TEST(SpatialWeights, DirectedEdgeJoinsComponent) {
  const auto w = bfs_blockalize(SpatialWeights(4, {{0, 2, 1.0}, {3, 1, 1.0}}));
  EXPECT_EQ(w.n_blocks(), 2);
  EXPECT_EQ(w.block_of(0), w.block_of(2));
  EXPECT_NE(w.block_of(0), w.block_of(1));
}

TEST(SpatialSolver, SolveAndLogDetMatchDense) {
  const auto w = ring_clusters({15, 1, 30, 4, 50}, 3, true, 8);
  const Eigen::VectorXd rho = random_rho(w.n(), 0.95, 3);
  SpatialSolver solver(w, rho);
  Rng rng(1);
  Eigen::MatrixXd c(w.n(), 3);
  for (int i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
  const Eigen::MatrixXd m = dense_m(w, rho);
  const Eigen::MatrixXd z = solver.solve(c);
  EXPECT_LT((m * z - c).norm() / c.norm(), 1e-12);
  const Eigen::MatrixXd zt = solver.solve_transpose(c);
  EXPECT_LT((m.transpose() * zt - c).norm() / c.norm(), 1e-12);
  EXPECT_NEAR(solver.log_abs_det(), dense_log_abs_det(w, rho), 1e-10);
  EXPECT_NEAR(log_det(rho, w), std::log(std::abs(m.determinant())), 1e-10);
}

TEST(SpatialSolver, UpdateMatchesFreshFactorization) {
  const auto w = ring_clusters({10, 20, 5}, 2, false);
  Eigen::VectorXd rho = random_rho(w.n(), 0.6, 2);
  SpatialSolver solver(w, rho);
  rho[3] = -0.9;
  rho[27] = 0.99;
  solver.update(rho);
  solver.set_rho(14, 0.3);
  rho[14] = 0.3;
  SpatialSolver fresh(w, rho);
  EXPECT_NEAR(solver.log_abs_det(), fresh.log_abs_det(), 1e-12);
  const Eigen::VectorXd c = Eigen::VectorXd::LinSpaced(w.n(), -1, 2);
  EXPECT_LT((solver.solve(c) - fresh.solve(c)).norm(), 1e-12);
  SpatialSolver copy = solver;
  EXPECT_LT((copy.solve(c) - fresh.solve(c)).norm(), 1e-12);
}

TEST(SpatialSolver, InverseColumnMatchesDenseInverse) {
  const auto w = ring_clusters({6, 9}, 2, true, 5);
  const Eigen::VectorXd rho = random_rho(w.n(), 0.8, 9);
  SpatialSolver solver(w, rho);
  const Eigen::MatrixXd inv = dense_m(w, rho).inverse();
  const auto& wb = solver.weights();
  for (int u = 0; u < w.n(); ++u) {
    const Eigen::VectorXd col = solver.inverse_column_local(u);
    const auto& members = wb.blocks()[wb.block_of(u)];
    for (std::size_t k = 0; k < members.size(); ++k) EXPECT_NEAR(col[k], inv(members[k], u), 1e-12);
  }
}

TEST(SpatialSolver, HagerEstimatesBoundNorms) {
  const auto w = ring_clusters({25, 25}, 2, true, 6);
  const Eigen::VectorXd rho = random_rho(w.n(), 0.97, 4);
  SpatialSolver solver(w, rho);
  const Eigen::MatrixXd inv = dense_m(w, rho).inverse();
  const double n1 = inv.cwiseAbs().colwise().sum().maxCoeff();
  const double ninf = inv.cwiseAbs().rowwise().sum().maxCoeff();
  EXPECT_LE(solver.inverse_norm1_estimate(), n1 * (1 + 1e-12));
  EXPECT_GE(solver.inverse_norm1_estimate(), 0.3 * n1);
  EXPECT_LE(solver.inverse_norm_inf_estimate(), ninf * (1 + 1e-12));
  EXPECT_GE(solver.inverse_norm_inf_estimate(), 0.3 * ninf);
}

TEST(SpatialSolver, SingularBlockIsReported) {
  // Two mutually linked units with rho = 1 give I - W singular.
  const SpatialWeights w(4, {{0, 1, 1.0}, {1, 0, 1.0}, {2, 3, 1.0}, {3, 2, 1.0}}, true);
  Eigen::VectorXd rho = Eigen::VectorXd::Constant(4, 0.5);
  rho[2] = rho[3] = 1.0;
  try {
    SpatialSolver s(w, rho);
    FAIL() << "expected SingularSystem";
  } catch (const SingularSystem& e) {
    EXPECT_EQ(e.block(), 1);
  }
}

TEST(SpatialSolver, EmptyWeightsGiveIdentity) {
  const auto w = SpatialWeights::empty(5);
  SpatialSolver s(w, Eigen::VectorXd::Constant(5, 0.7));
  const Eigen::VectorXd c = Eigen::VectorXd::LinSpaced(5, 0, 4);
  EXPECT_EQ(s.solve(c), c);
  EXPECT_EQ(s.log_abs_det(), 0.0);
}
