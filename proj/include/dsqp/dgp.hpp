#pragma once

#include <cstdint>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dsqp/panel.hpp"
#include "dsqp/spatial.hpp"

namespace dsqp {

/// Coefficient c_i(u) = level_i + slope * (u - 0.5), level_i ~ U(lo, hi).
struct CoefficientLaw {
  double lo = 0.0;
  double hi = 0.0;
  double slope = 0.0;
};

struct DgpConfig {
  int n_units = 50;
  int n_periods = 200;
  int n_covariates = 1;  // p, excluding the constant
  int n_factors = 1;
  std::uint64_t seed = 1;
  int burn_in = 50;
  int max_redraws = 100;

  CoefficientLaw rho{0.1, 0.4, 0.0};
  CoefficientLaw gamma{0.2, 0.5, 0.0};
  CoefficientLaw delta{-0.2, 0.2, 0.0};
  CoefficientLaw slope{0.5, 1.5, 0.0};  // b_ik for k >= 1
  CoefficientLaw intercept{-0.5, 0.5, 0.0};
  /// b_i0(u) adds error_scale * Phi^{-1}(u).
  double error_scale = 1.0;
  CoefficientLaw phi{0.3, 0.7, 0.0};
  double loading_mean = 1.0;
  double loading_sd = 0.5;
};

DgpConfig dgp_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DgpConfig& c);

/// Coefficient surfaces of the simulated process, evaluable at any u.
struct TrueParams {
  Eigen::VectorXd rho_level, gamma_level, delta_level;
  double rho_slope = 0.0, gamma_slope = 0.0, delta_slope = 0.0;
  Eigen::MatrixXd b_level;  // N x (p+1); column 0 is the intercept level
  Eigen::VectorXd b_slope;  // p+1
  double error_scale = 1.0;
  Eigen::MatrixXd lambda;   // N x r
  Eigen::MatrixXd f;        // T x r, retained periods only
  Eigen::VectorXd phi;

  /// Parameters of the tau-th quantile function; switches all on, r_max = r.
  QuantileParams at(double tau) const;

  nlohmann::json to_json() const;
  static TrueParams from_json(const nlohmann::json& j);
};

struct SimulatedPanel {
  PanelData data;
  TrueParams truth;
};

/// Simulate y_t = M(u_t)^{-1}[G(u_t) y_{t-1} + X_t b(u_t) + Lambda f_t] with u_it iid U(0,1).
SimulatedPanel simulate_dgp(const DgpConfig& config, const SpatialWeights& w);

/// Disjoint clusters with sizes uniform on [min_size, max_size]; each unit links to
/// `neighbors` random members of its cluster (symmetrized), then rows are normalized.
SpatialWeights clustered_weights(int n, int min_size, int max_size, int neighbors, std::uint64_t seed);

}  // namespace dsqp
