#pragma once

#include <memory>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

namespace dsqp {

using SparseRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using SparseCol = Eigen::SparseMatrix<double, Eigen::ColMajor>;

struct WeightTriplet {
  int i = 0;
  int j = 0;
  double w = 0.0;
};

/// Sparse N x N spatial weight matrix with zero diagonal.
///
/// Blocks are the connected components of the symmetrized adjacency graph and
/// are only populated by bfs_blockalize(). Within a block, units keep ascending
/// original order; blocks are sorted by descending size (ties by first member).
class SpatialWeights {
 public:
  SpatialWeights() = default;
  /// Throws DataError on out-of-range indices, self-loops, duplicates or non-finite weights.
  SpatialWeights(int n, const std::vector<WeightTriplet>& entries, bool row_normalized = false);

  static SpatialWeights empty(int n) { return SpatialWeights(n, {}); }
  static SpatialWeights from_dense(const Eigen::MatrixXd& dense, bool row_normalized = false);

  int n() const { return n_; }
  const SparseRow& matrix() const { return mat_; }
  Eigen::Index nnz() const { return mat_.nonZeros(); }
  bool row_normalized() const { return row_normalized_; }
  std::vector<WeightTriplet> entries() const;
  Eigen::MatrixXd to_dense() const { return Eigen::MatrixXd(mat_); }

  Eigen::VectorXd row_sums() const;
  /// max |row sum - 1| over nonempty rows.
  double max_row_sum_deviation() const;

  bool blockalized() const { return !blocks_.empty() || n_ == 0; }
  int n_blocks() const { return static_cast<int>(blocks_.size()); }
  const std::vector<std::vector<int>>& blocks() const { return blocks_; }
  /// permutation()[k] is the original index of the k-th unit in block order.
  const std::vector<int>& permutation() const { return permutation_; }
  int block_of(int unit) const { return block_of_[unit]; }
  int local_index(int unit) const { return local_of_[unit]; }
  /// Local W restricted to one block, in the block's member order.
  SparseCol block_matrix(int b) const;

 private:
  friend SpatialWeights bfs_blockalize(const SpatialWeights& w);
  friend SpatialWeights normalize_rows(const SpatialWeights& w);

  int n_ = 0;
  SparseRow mat_;
  bool row_normalized_ = false;
  std::vector<std::vector<int>> blocks_;
  std::vector<int> permutation_;
  std::vector<int> block_of_;
  std::vector<int> local_of_;
};

/// Connected components by breadth-first search on the symmetrized pattern.
SpatialWeights bfs_blockalize(const SpatialWeights& w);

/// Scale every nonempty row to sum to one. Edge set and blocks are preserved.
SpatialWeights normalize_rows(const SpatialWeights& w);

/// Factorization of one diagonal block of (I - diag(rho) W).
class BlockLU : public Eigen::SparseLU<SparseCol, Eigen::COLAMDOrdering<int>> {
 public:
  /// (min |u_jj|, max |u_jj|) over the pivots of U.
  std::pair<double, double> pivot_range() const;
};

/// Solver for (I - diag(rho) W) z = c, factorized block by block.
///
/// Factorizations are cached per block and refreshed only for blocks whose rho
/// entries changed. A pivot below 1e-12 times the largest pivot in the block is
/// reported as SingularSystem.
class SpatialSolver {
 public:
  SpatialSolver(const SpatialWeights& w, const Eigen::VectorXd& rho);
  SpatialSolver(const SpatialSolver& other);
  SpatialSolver& operator=(const SpatialSolver& other);
  SpatialSolver(SpatialSolver&&) noexcept;
  SpatialSolver& operator=(SpatialSolver&&) noexcept;
  ~SpatialSolver();

  int n() const { return n_; }
  const Eigen::VectorXd& rho() const { return rho_; }
  const SpatialWeights& weights() const { return *weights_; }

  /// Refactor the blocks whose rho entries differ from the cached ones.
  void update(const Eigen::VectorXd& rho);
  /// Change one unit's rho and refactor its block.
  void set_rho(int unit, double value);

  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;
  Eigen::MatrixXd solve_transpose(const Eigen::MatrixXd& rhs) const;
  /// Solve restricted to block b; rhs is in the block's local ordering.
  Eigen::MatrixXd solve_block(int b, const Eigen::MatrixXd& rhs) const;

  double log_abs_det() const;
  double block_log_abs_det(int b) const;

  /// Column `unit` of (I - diag(rho) W)^{-1}, local to the unit's block.
  Eigen::VectorXd inverse_column_local(int unit) const;

  /// Hager estimates of the 1-norm and inf-norm of (I - diag(rho) W)^{-1}.
  double inverse_norm1_estimate() const;
  double inverse_norm_inf_estimate() const;

 private:
  struct Block;
  void factor_block(int b);

  int n_ = 0;
  std::shared_ptr<const SpatialWeights> weights_;
  Eigen::VectorXd rho_;
  std::vector<std::unique_ptr<Block>> blocks_;
};

/// Dense log|det(I - diag(rho) W)|; reference path for small systems.
double dense_log_abs_det(const SpatialWeights& w, const Eigen::VectorXd& rho);

/// Convenience wrappers matching the module operations.
Eigen::MatrixXd solve_system(const Eigen::VectorXd& rho, const SpatialWeights& w, const Eigen::MatrixXd& rhs);
double log_det(const Eigen::VectorXd& rho, const SpatialWeights& w);

}  // namespace dsqp
