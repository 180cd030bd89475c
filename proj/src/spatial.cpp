#include "dsqp/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <string>

#include "dsqp/errors.hpp"

namespace dsqp {

SpatialWeights::SpatialWeights(int n, const std::vector<WeightTriplet>& entries, bool row_normalized)
    : n_(n), mat_(n, n), row_normalized_(row_normalized) {
  if (n < 0) throw DataError("weight matrix size must be non-negative");
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(entries.size());
  for (const auto& e : entries) {
    if (e.i < 0 || e.i >= n || e.j < 0 || e.j >= n) {
      throw DataError("weight entry (" + std::to_string(e.i) + ", " + std::to_string(e.j) +
                      ") outside 0.." + std::to_string(n - 1));
    }
    if (!std::isfinite(e.w)) throw DataError("non-finite weight at (" + std::to_string(e.i) + ", " + std::to_string(e.j) + ")");
    if (e.i == e.j && e.w != 0.0) throw DataError("nonzero diagonal weight at unit " + std::to_string(e.i));
    if (e.w == 0.0) continue;
    trip.emplace_back(e.i, e.j, e.w);
  }
  std::sort(trip.begin(), trip.end(), [](const auto& a, const auto& b) {
    return a.row() != b.row() ? a.row() < b.row() : a.col() < b.col();
  });
  for (std::size_t k = 1; k < trip.size(); ++k) {
    if (trip[k].row() == trip[k - 1].row() && trip[k].col() == trip[k - 1].col()) {
      throw DataError("duplicate weight entry (" + std::to_string(trip[k].row()) + ", " +
                      std::to_string(trip[k].col()) + ")");
    }
  }
  mat_.setFromTriplets(trip.begin(), trip.end());
  mat_.makeCompressed();
  if (row_normalized_ && max_row_sum_deviation() > 1e-12) {
    throw DataError("weights flagged row-normalized but a row sum deviates from 1 by more than 1e-12");
  }
}

SpatialWeights SpatialWeights::from_dense(const Eigen::MatrixXd& dense, bool row_normalized) {
  if (dense.rows() != dense.cols()) throw DataError("weight matrix must be square");
  std::vector<WeightTriplet> entries;
  for (Eigen::Index i = 0; i < dense.rows(); ++i)
    for (Eigen::Index j = 0; j < dense.cols(); ++j)
      if (dense(i, j) != 0.0) entries.push_back({static_cast<int>(i), static_cast<int>(j), dense(i, j)});
  return SpatialWeights(static_cast<int>(dense.rows()), entries, row_normalized);
}

std::vector<WeightTriplet> SpatialWeights::entries() const {
  std::vector<WeightTriplet> out;
  out.reserve(static_cast<std::size_t>(mat_.nonZeros()));
  for (int i = 0; i < n_; ++i)
    for (SparseRow::InnerIterator it(mat_, i); it; ++it) out.push_back({i, static_cast<int>(it.col()), it.value()});
  return out;
}

Eigen::VectorXd SpatialWeights::row_sums() const {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(n_);
  for (int i = 0; i < n_; ++i)
    for (SparseRow::InnerIterator it(mat_, i); it; ++it) s[i] += it.value();
  return s;
}

double SpatialWeights::max_row_sum_deviation() const {
  double worst = 0.0;
  for (int i = 0; i < n_; ++i) {
    if (mat_.outerIndexPtr()[i] == mat_.outerIndexPtr()[i + 1]) continue;
    double s = 0.0;
    for (SparseRow::InnerIterator it(mat_, i); it; ++it) s += it.value();
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

SparseCol SpatialWeights::block_matrix(int b) const {
  const auto& members = blocks_.at(static_cast<std::size_t>(b));
  const int m = static_cast<int>(members.size());
  std::vector<Eigen::Triplet<double>> trip;
  for (int li = 0; li < m; ++li) {
    for (SparseRow::InnerIterator it(mat_, members[li]); it; ++it) {
      trip.emplace_back(li, local_of_[it.col()], it.value());
    }
  }
  SparseCol out(m, m);
  out.setFromTriplets(trip.begin(), trip.end());
  out.makeCompressed();
  return out;
}

SpatialWeights bfs_blockalize(const SpatialWeights& w) {
  SpatialWeights out = w;
  const int n = w.n();
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (SparseRow::InnerIterator it(w.mat_, i); it; ++it) {
      const int j = static_cast<int>(it.col());
      adj[i].push_back(j);
      adj[j].push_back(i);
    }
  }
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::vector<std::vector<int>> comps;
  std::deque<int> queue;
  for (int s = 0; s < n; ++s) {
    if (seen[s]) continue;
    std::vector<int> comp;
    seen[s] = 1;
    queue.push_back(s);
    while (!queue.empty()) {
      const int u = queue.front();
      queue.pop_front();
      comp.push_back(u);
      for (int v : adj[u]) {
        if (!seen[v]) {
          seen[v] = 1;
          queue.push_back(v);
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    comps.push_back(std::move(comp));
  }
  std::stable_sort(comps.begin(), comps.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() > b.size() : a.front() < b.front();
  });
  out.blocks_ = std::move(comps);
  out.permutation_.clear();
  out.block_of_.assign(static_cast<std::size_t>(n), -1);
  out.local_of_.assign(static_cast<std::size_t>(n), -1);
  for (int b = 0; b < out.n_blocks(); ++b) {
    const auto& members = out.blocks_[b];
    for (int k = 0; k < static_cast<int>(members.size()); ++k) {
      out.permutation_.push_back(members[k]);
      out.block_of_[members[k]] = b;
      out.local_of_[members[k]] = k;
    }
  }
  return out;
}

SpatialWeights normalize_rows(const SpatialWeights& w) {
  SpatialWeights out = w;
  for (int i = 0; i < w.n(); ++i) {
    double s = 0.0;
    for (SparseRow::InnerIterator it(out.mat_, i); it; ++it) s += it.value();
    if (out.mat_.outerIndexPtr()[i] == out.mat_.outerIndexPtr()[i + 1]) continue;
    if (s == 0.0) throw DataError("row " + std::to_string(i) + " has weights summing to zero; cannot normalize");
    for (SparseRow::InnerIterator it(out.mat_, i); it; ++it) it.valueRef() /= s;
  }
  out.row_normalized_ = true;
  return out;
}

std::pair<double, double> BlockLU::pivot_range() const {
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  for (Eigen::Index j = 0; j < this->cols(); ++j) {
    double pivot = 0.0;
    for (SCMatrix::InnerIterator it(m_Lstore, j); it; ++it) {
      if (it.index() == j) {
        pivot = std::abs(it.value());
        break;
      }
    }
    lo = std::min(lo, pivot);
    hi = std::max(hi, pivot);
  }
  return {lo, hi};
}

struct SpatialSolver::Block {
  std::vector<int> members;
  SparseCol system;
  std::vector<double> w_values;  // W entries aligned with system.valuePtr(); 0 on the diagonal
  std::vector<int> rows;         // row index of each stored value
  std::unique_ptr<BlockLU> lu;   // null for singletons, whose system is [1]
  double log_abs_det = 0.0;
};

SpatialSolver::SpatialSolver(const SpatialWeights& w, const Eigen::VectorXd& rho)
    : n_(w.n()),
      weights_(std::make_shared<const SpatialWeights>(w.blockalized() ? w : bfs_blockalize(w))),
      rho_(rho) {
  if (rho.size() != n_) throw std::invalid_argument("rho length does not match weight matrix");
  const auto& wb = *weights_;
  blocks_.reserve(static_cast<std::size_t>(wb.n_blocks()));
  for (int b = 0; b < wb.n_blocks(); ++b) {
    auto blk = std::make_unique<Block>();
    blk->members = wb.blocks()[b];
    const int m = static_cast<int>(blk->members.size());
    if (m > 1) {
      SparseCol local = wb.block_matrix(b);
      std::vector<Eigen::Triplet<double>> trip;
      for (int c = 0; c < m; ++c) {
        trip.emplace_back(c, c, 0.0);
        for (SparseCol::InnerIterator it(local, c); it; ++it) trip.emplace_back(it.row(), c, it.value());
      }
      blk->system.resize(m, m);
      blk->system.setFromTriplets(trip.begin(), trip.end());
      blk->system.makeCompressed();
      const auto nnz = static_cast<std::size_t>(blk->system.nonZeros());
      blk->w_values.assign(blk->system.valuePtr(), blk->system.valuePtr() + nnz);
      blk->rows.assign(blk->system.innerIndexPtr(), blk->system.innerIndexPtr() + nnz);
      blk->lu = std::make_unique<BlockLU>();
      blk->lu->analyzePattern(blk->system);
    }
    blocks_.push_back(std::move(blk));
  }
  for (int b = 0; b < static_cast<int>(blocks_.size()); ++b) factor_block(b);
}

SpatialSolver::SpatialSolver(const SpatialSolver& other) : SpatialSolver(*other.weights_, other.rho_) {}

SpatialSolver& SpatialSolver::operator=(const SpatialSolver& other) {
  if (this != &other) *this = SpatialSolver(other);
  return *this;
}

SpatialSolver::~SpatialSolver() = default;
SpatialSolver::SpatialSolver(SpatialSolver&&) noexcept = default;
SpatialSolver& SpatialSolver::operator=(SpatialSolver&&) noexcept = default;

void SpatialSolver::factor_block(int b) {
  Block& blk = *blocks_[b];
  if (!blk.lu) {
    blk.log_abs_det = 0.0;
    return;
  }
  double* values = blk.system.valuePtr();
  const SparseCol& sys = blk.system;
  for (Eigen::Index c = 0; c < sys.outerSize(); ++c) {
    for (auto k = sys.outerIndexPtr()[c]; k < sys.outerIndexPtr()[c + 1]; ++k) {
      const int r = blk.rows[static_cast<std::size_t>(k)];
      values[k] = (r == c) ? 1.0 : -rho_[blk.members[r]] * blk.w_values[static_cast<std::size_t>(k)];
    }
  }
  blk.lu->factorize(blk.system);
  if (blk.lu->info() != Eigen::Success) throw SingularSystem(b, "LU factorization failed: " + blk.lu->lastErrorMessage());
  const auto [lo, hi] = blk.lu->pivot_range();
  if (!(lo >= 1e-12 * hi)) throw SingularSystem(b, "pivot below 1e-12 of the largest pivot");
  blk.log_abs_det = blk.lu->logAbsDeterminant();
}

void SpatialSolver::update(const Eigen::VectorXd& rho) {
  if (rho.size() != n_) throw std::invalid_argument("rho length does not match weight matrix");
  for (int b = 0; b < static_cast<int>(blocks_.size()); ++b) {
    bool changed = false;
    for (int u : blocks_[b]->members) changed = changed || (rho[u] != rho_[u]);
    if (!changed) continue;
    for (int u : blocks_[b]->members) rho_[u] = rho[u];
    factor_block(b);
  }
}

void SpatialSolver::set_rho(int unit, double value) {
  if (rho_[unit] == value) return;
  rho_[unit] = value;
  factor_block(weights_->block_of(unit));
}

Eigen::MatrixXd SpatialSolver::solve_block(int b, const Eigen::MatrixXd& rhs) const {
  const Block& blk = *blocks_[b];
  if (!blk.lu) return rhs;
  Eigen::MatrixXd out = blk.lu->solve(rhs);
  return out;
}

Eigen::MatrixXd SpatialSolver::solve(const Eigen::MatrixXd& rhs) const {
  if (rhs.rows() != n_) throw std::invalid_argument("rhs rows do not match weight matrix");
  Eigen::MatrixXd out(rhs.rows(), rhs.cols());
  for (const auto& blk : blocks_) {
    const int m = static_cast<int>(blk->members.size());
    if (!blk->lu) {
      out.row(blk->members[0]) = rhs.row(blk->members[0]);
      continue;
    }
    Eigen::MatrixXd local(m, rhs.cols());
    for (int k = 0; k < m; ++k) local.row(k) = rhs.row(blk->members[k]);
    Eigen::MatrixXd sol = blk->lu->solve(local);
    for (int k = 0; k < m; ++k) out.row(blk->members[k]) = sol.row(k);
  }
  return out;
}

Eigen::MatrixXd SpatialSolver::solve_transpose(const Eigen::MatrixXd& rhs) const {
  if (rhs.rows() != n_) throw std::invalid_argument("rhs rows do not match weight matrix");
  Eigen::MatrixXd out(rhs.rows(), rhs.cols());
  for (const auto& blk : blocks_) {
    const int m = static_cast<int>(blk->members.size());
    if (!blk->lu) {
      out.row(blk->members[0]) = rhs.row(blk->members[0]);
      continue;
    }
    Eigen::MatrixXd local(m, rhs.cols());
    for (int k = 0; k < m; ++k) local.row(k) = rhs.row(blk->members[k]);
    Eigen::MatrixXd sol = blk->lu->transpose().solve(local);
    for (int k = 0; k < m; ++k) out.row(blk->members[k]) = sol.row(k);
  }
  return out;
}

double SpatialSolver::log_abs_det() const {
  double s = 0.0;
  for (const auto& blk : blocks_) s += blk->log_abs_det;
  return s;
}

double SpatialSolver::block_log_abs_det(int b) const { return blocks_.at(static_cast<std::size_t>(b))->log_abs_det; }

Eigen::VectorXd SpatialSolver::inverse_column_local(int unit) const {
  const int b = weights_->block_of(unit);
  const int m = static_cast<int>(blocks_[b]->members.size());
  Eigen::VectorXd e = Eigen::VectorXd::Zero(m);
  e[weights_->local_index(unit)] = 1.0;
  return solve_block(b, e);
}

namespace {

template <typename Apply, typename ApplyT>
double hager_norm1(int n, Apply apply, ApplyT apply_t) {
  if (n == 0) return 0.0;
  Eigen::VectorXd x = Eigen::VectorXd::Constant(n, 1.0 / n);
  double estimate = 0.0;
  for (int iter = 0; iter < 5; ++iter) {
    const Eigen::VectorXd y = apply(x);
    estimate = y.lpNorm<1>();
    const Eigen::VectorXd xi = y.unaryExpr([](double v) { return v >= 0.0 ? 1.0 : -1.0; });
    const Eigen::VectorXd z = apply_t(xi);
    Eigen::Index j = 0;
    const double zmax = z.cwiseAbs().maxCoeff(&j);
    if (zmax <= z.dot(x)) break;
    x.setZero();
    x[j] = 1.0;
  }
  return estimate;
}

}  // namespace

double SpatialSolver::inverse_norm1_estimate() const {
  return hager_norm1(
      n_, [this](const Eigen::VectorXd& v) -> Eigen::VectorXd { return solve(v); },
      [this](const Eigen::VectorXd& v) -> Eigen::VectorXd { return solve_transpose(v); });
}

double SpatialSolver::inverse_norm_inf_estimate() const {
  return hager_norm1(
      n_, [this](const Eigen::VectorXd& v) -> Eigen::VectorXd { return solve_transpose(v); },
      [this](const Eigen::VectorXd& v) -> Eigen::VectorXd { return solve(v); });
}

double dense_log_abs_det(const SpatialWeights& w, const Eigen::VectorXd& rho) {
  const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(w.n(), w.n()) - rho.asDiagonal() * w.to_dense();
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  return lu.matrixLU().diagonal().cwiseAbs().array().log().sum();
}

Eigen::MatrixXd solve_system(const Eigen::VectorXd& rho, const SpatialWeights& w, const Eigen::MatrixXd& rhs) {
  return SpatialSolver(w, rho).solve(rhs);
}

double log_det(const Eigen::VectorXd& rho, const SpatialWeights& w) { return SpatialSolver(w, rho).log_abs_det(); }

}  // namespace dsqp
