#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dsqp/spatial.hpp"

namespace dsqp {

/// Balanced panel: y is N x T, x holds p+1 covariate slices of N x T each.
struct PanelData {
  Eigen::MatrixXd y;
  std::vector<Eigen::MatrixXd> x;
  /// When true, x[0] is the constant regressor. Full dummy sets may replace it.
  bool has_intercept = true;
  std::vector<std::string> unit_ids;
  std::vector<std::string> time_ids;
  std::vector<std::string> covariate_names;

  int n_units() const { return static_cast<int>(y.rows()); }
  int n_periods() const { return static_cast<int>(y.cols()); }
  int n_covariates() const { return static_cast<int>(x.size()); }

  /// Throws DataError when shapes disagree, entries are missing, or x[0] != 1 with an intercept.
  void validate() const;
  /// N x T matrix with entries x_it' b_i, b being N x (p+1).
  Eigen::MatrixXd linear_predictor(const Eigen::MatrixXd& b) const;
  /// T x (p+1) design for one unit.
  Eigen::MatrixXd unit_design(int i) const;
};

/// Full parameter state for one quantile level.
struct QuantileParams {
  double tau = 0.5;
  Eigen::VectorXd rho;
  Eigen::VectorXd delta;
  Eigen::VectorXd gamma;
  Eigen::MatrixXd b;       // N x (p+1)
  Eigen::MatrixXd lambda;  // N x r_max
  Eigen::MatrixXd f;       // T x r_max
  Eigen::VectorXd phi;     // r_max
  Eigen::VectorXi switches;
  double sigma = 1.0;
  double sigma_q2 = 0.01;

  static QuantileParams zeros(double tau, int n_units, int n_periods, int n_covariates, int r_max);

  int n_units() const { return static_cast<int>(rho.size()); }
  int r_max() const { return static_cast<int>(phi.size()); }
  int active_factors() const { return switches.sum(); }
  /// N x T matrix Lambda (s o f_t).
  Eigen::MatrixXd factor_term() const;
};

struct LatentState {
  Eigen::MatrixXd q;  // N x T latent quantile surface
  Eigen::MatrixXd v;  // N x T ALD mixing variables, strictly positive
};

/// Constants of the normal scale-mixture representation of the ALD.
struct AldConstants {
  double xi1 = 0.0;
  double xi2 = 0.0;
  static AldConstants from_tau(double tau);
};

/// Applies S = (I - diag(rho) W)^{-1} and A = S (diag(gamma) + diag(delta) W) through solves.
class SpatialOperators {
 public:
  SpatialOperators(const Eigen::VectorXd& rho, const Eigen::VectorXd& delta, const Eigen::VectorXd& gamma,
                   const SpatialWeights& w);

  Eigen::MatrixXd solve(const Eigen::MatrixXd& c) const { return solver_.solve(c); }
  /// (diag(gamma) + diag(delta) W) c
  Eigen::MatrixXd apply_lag(const Eigen::MatrixXd& c) const;
  Eigen::MatrixXd apply_a(const Eigen::MatrixXd& c) const { return solver_.solve(apply_lag(c)); }
  const SpatialSolver& solver() const { return solver_; }

 private:
  SpatialSolver solver_;
  Eigen::VectorXd delta_;
  Eigen::VectorXd gamma_;
  SparseRow w_;
};

SpatialOperators build_spatial_operators(const Eigen::VectorXd& rho, const Eigen::VectorXd& delta,
                                         const Eigen::VectorXd& gamma, const SpatialWeights& w);

struct StationarityReport {
  double spectral_radius = 0.0;
  bool stationary = false;
  bool converged = true;
  int iterations = 0;
};

/// Power iteration on A applied through solves. Non-convergence is reported, not thrown.
StationarityReport check_stationarity(const Eigen::VectorXd& rho, const Eigen::VectorXd& delta,
                                      const Eigen::VectorXd& gamma, const SpatialWeights& w,
                                      int max_iterations = 1000, double tolerance = 1e-8);

/// Deterministic quantile surface: (I - diag(rho) W) Q_t = (diag(gamma) + diag(delta) W) Q_{t-1}
/// + X_t b + Lambda (s o f_t), with Q_0 = 0.
Eigen::MatrixXd quantile_recursion(const QuantileParams& params, const PanelData& data, const SpatialWeights& w);
Eigen::MatrixXd quantile_recursion(const QuantileParams& params, const PanelData& data, const SpatialOperators& ops);

/// (1/NT) sum_it q_tau(y_it - Q_it).
double quantile_loss(const Eigen::MatrixXd& y, const Eigen::MatrixXd& q, double tau);
double quantile_loss(const PanelData& data, const QuantileParams& params, const SpatialWeights& w);

}  // namespace dsqp
