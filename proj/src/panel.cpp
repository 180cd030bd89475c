#include "dsqp/panel.hpp"

#include <cmath>
#include <string>

#include "dsqp/distributions.hpp"
#include "dsqp/errors.hpp"
#include "dsqp/rng.hpp"

namespace dsqp {

void PanelData::validate() const {
  if (y.rows() < 1) throw DataError("panel needs at least one unit");
  if (y.cols() < 2) throw DataError("panel needs at least two periods");
  if (x.empty()) throw DataError("panel needs at least one covariate column");
  if (!y.allFinite()) throw DataError("response contains missing or non-finite values");
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (x[k].rows() != y.rows() || x[k].cols() != y.cols())
      throw DataError("covariate slice " + std::to_string(k) + " does not match the response shape");
    if (!x[k].allFinite()) throw DataError("covariate slice " + std::to_string(k) + " contains non-finite values");
  }
  if (has_intercept && (x[0].array() != 1.0).any()) throw DataError("first covariate slice must be the constant 1");
}

Eigen::MatrixXd PanelData::linear_predictor(const Eigen::MatrixXd& b) const {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(y.rows(), y.cols());
  for (int k = 0; k < n_covariates(); ++k) out += b.col(k).asDiagonal() * x[k];
  return out;
}

Eigen::MatrixXd PanelData::unit_design(int i) const {
  Eigen::MatrixXd d(n_periods(), n_covariates());
  for (int k = 0; k < n_covariates(); ++k) d.col(k) = x[k].row(i).transpose();
  return d;
}

QuantileParams QuantileParams::zeros(double tau, int n_units, int n_periods, int n_covariates, int r_max) {
  QuantileParams p;
  p.tau = tau;
  p.rho = Eigen::VectorXd::Zero(n_units);
  p.delta = Eigen::VectorXd::Zero(n_units);
  p.gamma = Eigen::VectorXd::Zero(n_units);
  p.b = Eigen::MatrixXd::Zero(n_units, n_covariates);
  p.lambda = Eigen::MatrixXd::Zero(n_units, r_max);
  p.f = Eigen::MatrixXd::Zero(n_periods, r_max);
  p.phi = Eigen::VectorXd::Zero(r_max);
  p.switches = Eigen::VectorXi::Ones(r_max);
  return p;
}

Eigen::MatrixXd QuantileParams::factor_term() const {
  if (r_max() == 0) return Eigen::MatrixXd::Zero(rho.size(), f.rows());
  const Eigen::VectorXd s = switches.cast<double>();
  return lambda * s.asDiagonal() * f.transpose();
}

AldConstants AldConstants::from_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie strictly inside (0, 1)");
  const double v = tau * (1.0 - tau);
  return {(1.0 - 2.0 * tau) / v, std::sqrt(2.0 / v)};
}

SpatialOperators::SpatialOperators(const Eigen::VectorXd& rho, const Eigen::VectorXd& delta,
                                   const Eigen::VectorXd& gamma, const SpatialWeights& w)
    : solver_(w, rho), delta_(delta), gamma_(gamma), w_(w.matrix()) {
  if (delta.size() != w.n() || gamma.size() != w.n())
    throw std::invalid_argument("coefficient vectors must have length N");
}

Eigen::MatrixXd SpatialOperators::apply_lag(const Eigen::MatrixXd& c) const {
  return gamma_.asDiagonal() * c + delta_.asDiagonal() * (w_ * c);
}

SpatialOperators build_spatial_operators(const Eigen::VectorXd& rho, const Eigen::VectorXd& delta,
                                         const Eigen::VectorXd& gamma, const SpatialWeights& w) {
  return SpatialOperators(rho, delta, gamma, w);
}

StationarityReport check_stationarity(const Eigen::VectorXd& rho, const Eigen::VectorXd& delta,
                                      const Eigen::VectorXd& gamma, const SpatialWeights& w, int max_iterations,
                                      double tolerance) {
  const SpatialOperators ops(rho, delta, gamma, w);
  const int n = w.n();
  StationarityReport report;
  if (n == 0) return {0.0, true, true, 0};

  // Fixed-seed start so the report is reproducible.
  Rng rng(0x5eed, {0x57a7});
  Eigen::VectorXd x(n);
  for (int i = 0; i < n; ++i) x[i] = 1.0 + 0.1 * rng.uniform();
  x.normalize();

  // Two-step estimate sqrt(|A^2 x| / |x|) also settles for +/- eigenvalue pairs.
  double prev_ratio = 0.0;
  double prev_estimate = -1.0;
  double log_growth = 0.0;
  const int window = 50;
  std::vector<double> log_ratios;
  for (int it = 1; it <= max_iterations; ++it) {
    Eigen::VectorXd y = ops.apply_a(x);
    const double ratio = y.norm();
    report.iterations = it;
    if (ratio == 0.0) {
      report.spectral_radius = 0.0;
      report.stationary = true;
      return report;
    }
    log_ratios.push_back(std::log(ratio));
    const double estimate = it == 1 ? ratio : std::sqrt(ratio * prev_ratio);
    if (it > 2 && std::abs(estimate - prev_estimate) <= tolerance * estimate) {
      report.spectral_radius = estimate;
      report.stationary = estimate < 1.0;
      return report;
    }
    prev_estimate = estimate;
    prev_ratio = ratio;
    x = y / ratio;
  }
  const int m = std::min<int>(window, static_cast<int>(log_ratios.size()));
  for (int k = static_cast<int>(log_ratios.size()) - m; k < static_cast<int>(log_ratios.size()); ++k)
    log_growth += log_ratios[k];
  report.spectral_radius = std::exp(log_growth / m);
  report.stationary = report.spectral_radius < 1.0;
  report.converged = false;
  return report;
}

Eigen::MatrixXd quantile_recursion(const QuantileParams& params, const PanelData& data, const SpatialOperators& ops) {
  const int n = data.n_units();
  const int t_len = data.n_periods();
  const Eigen::MatrixXd drive = data.linear_predictor(params.b) + params.factor_term();
  Eigen::MatrixXd q(n, t_len);
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(n);
  for (int t = 0; t < t_len; ++t) {
    Eigen::VectorXd rhs = drive.col(t);
    if (t > 0) rhs += ops.apply_lag(prev);
    q.col(t) = ops.solve(rhs);
    prev = q.col(t);
  }
  return q;
}

Eigen::MatrixXd quantile_recursion(const QuantileParams& params, const PanelData& data, const SpatialWeights& w) {
  return quantile_recursion(params, data, SpatialOperators(params.rho, params.delta, params.gamma, w));
}

double quantile_loss(const Eigen::MatrixXd& y, const Eigen::MatrixXd& q, double tau) {
  double s = 0.0;
  for (Eigen::Index t = 0; t < y.cols(); ++t)
    for (Eigen::Index i = 0; i < y.rows(); ++i) s += check_loss(y(i, t) - q(i, t), tau);
  return s / static_cast<double>(y.size());
}

double quantile_loss(const PanelData& data, const QuantileParams& params, const SpatialWeights& w) {
  return quantile_loss(data.y, quantile_recursion(params, data, w), params.tau);
}

}  // namespace dsqp
