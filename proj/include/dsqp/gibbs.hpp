#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dsqp/panel.hpp"
#include "dsqp/rng.hpp"
#include "dsqp/spatial.hpp"

namespace dsqp {

struct PriorConfig {
  double m_gamma = 0.0, h_gamma = 1.0;
  double m_delta = 0.0, h_delta = 1.0;
  double m_rho = 0.0, h_rho = 1.0;
  Eigen::VectorXd m_b;  // empty means zeros
  Eigen::MatrixXd H_b;  // empty means h_b I
  double h_b = 0.01;
  double h_f = 1.0;
  double h_lambda = 1.0;
  double v_sigma = 1.0, s_sigma = 1.0;  // shape, rate
  double pi_switch = 0.5;

  /// Fill empty m_b / H_b for p+1 covariates and check positivity.
  void resolve(int n_covariates);
  nlohmann::json to_json() const;
  static PriorConfig from_json(const nlohmann::json& j);
};

struct StepToggles {
  bool gamma = true, delta = true, b = true, rho = true, factors = true, phi = true, loadings = true, sigma = true,
       v = true, q = true, switches = true;
  nlohmann::json to_json() const;
  static StepToggles from_json(const nlohmann::json& j);
};

enum class SigmaQ2Mode { Fixed, TargetR2 };

struct SamplerConfig {
  int n_sweeps = 2000;  // after burn-in
  int n_burnin = 1000;
  int thinning = 1;
  std::uint64_t seed = 1;
  int r_max = 8;
  bool factor_select = true;
  SigmaQ2Mode sigma_q2_mode = SigmaQ2Mode::TargetR2;
  double sigma_q2 = 0.0;  // fixed value, or 0 for 1e-3 var(y)
  double target_r2 = 0.98;
  double decay = 1.0;  // sigma_q2(k) = sigma_q2(0) * decay^k
  int tune_sweeps = 40;
  int tune_iterations = 10;
  double sigma_init = 0.0;  // 0 means the mean check loss at initialization
  StepToggles toggles;

  void validate() const;
  nlohmann::json to_json() const;
  static SamplerConfig from_json(const nlohmann::json& j);
};

struct SweepDiagnostics {
  long sweep = 0;
  double r2_randomization = 0.0;
  double accept_rate_rho = 0.0;
  double accept_rate_sigma = 0.0;
  double loglik_pseudo = 0.0;
  double sigma = 0.0;
  double sigma_q2 = 0.0;
  int active_factors = 0;
  int rho_fallbacks = 0;
};

struct SamplerState {
  QuantileParams params;
  LatentState latent;
  AldConstants ald;
  std::optional<SpatialSolver> solver;
  Rng chain;
  long sweep = 0;
  double sigma_q2_base = 0.0;
  double log_sigma_step = 0.1;
  int sigma_window_accepts = 0;
  int sigma_window_trials = 0;
  Eigen::VectorXd rho_rw_step;
  int last_rho_accepts = 0;
  int last_rho_fallbacks = 0;
  bool last_sigma_accept = false;
};

/// Exact conditional log-kernel of one rho_i, up to a constant:
/// -h/2 (r - m)^2 + T log|1 - (r - rho_cur) g|, with g = w_i' M^{-1} e_i at the current rho.
struct RhoConditional {
  double h_bar = 1.0;
  double m_bar = 0.0;
  double g = 0.0;
  double rho_cur = 0.0;
  int t_len = 0;
  double log_kernel(double r) const;
};

/// Laplace mixture around the kernel's modes, one per side of its singular point.
struct RhoMixture {
  int components = 0;
  double mean[2] = {0.0, 0.0};
  double sd[2] = {1.0, 1.0};
  double weight[2] = {1.0, 0.0};
  bool ok = false;
  double log_density(double r) const;
  double draw(Rng& rng) const;
};

RhoMixture fit_rho_mixture(const RhoConditional& k);

class GibbsEngine {
 public:
  GibbsEngine(const PanelData& data, const SpatialWeights& w, PriorConfig prior, SamplerConfig config);

  const PanelData& data() const { return data_; }
  const SpatialWeights& weights() const { return w_; }
  const PriorConfig& prior() const { return prior_; }
  const SamplerConfig& config() const { return config_; }

  /// Starting state for one quantile level (no sigma_q2 tuning).
  SamplerState initialize(double tau) const;
  /// Wrap explicit parameters and latent values into a state.
  SamplerState make_state(const QuantileParams& params, const LatentState& latent) const;

  /// One full sweep in the fixed order; adapt enables step-size adaptation.
  SweepDiagnostics sweep(SamplerState& s, bool adapt) const;

  /// Bisection on log sigma_q2 with short pre-runs so the mean R^2 hits target_r2.
  double tune_sigma_q2(SamplerState& s) const;

  void draw_gamma(SamplerState& s, Rng& rng) const;
  void draw_delta(SamplerState& s, Rng& rng) const;
  void draw_b(SamplerState& s, Rng& rng) const;
  /// Returns the number of accepted unit updates.
  int draw_rho(SamplerState& s, Rng& rng, bool adapt) const;
  void draw_factors(SamplerState& s, Rng& rng) const;
  void draw_phi(SamplerState& s, Rng& rng) const;
  void draw_loadings(SamplerState& s, Rng& rng) const;
  bool draw_sigma(SamplerState& s, Rng& rng) const;
  void draw_v(SamplerState& s, Rng& rng) const;
  void draw_q(SamplerState& s, Rng& rng) const;

  /// Conditional kernel of rho_i at the current state.
  RhoConditional rho_conditional(const SamplerState& s, int unit) const;

  /// Residual Q - rho o WQ - gamma o Qlag - delta o WQlag - XB - Lambda(s o f).
  Eigen::MatrixXd structural_residual(const SamplerState& s) const;
  /// Q - rho o WQ - gamma o Qlag - delta o WQlag - XB: the factor-step target.
  Eigen::MatrixXd factor_target(const SamplerState& s) const;
  double r2_randomization(const SamplerState& s) const;
  double loglik_pseudo(const SamplerState& s) const;
  double sigma_log_target(const SamplerState& s, double log_sigma) const;

  /// Q_{t-1} columns with a zero first column.
  static Eigen::MatrixXd lagged(const Eigen::MatrixXd& q);

 private:
  const PanelData& data_;
  SpatialWeights w_;
  PriorConfig prior_;
  SamplerConfig config_;
  std::vector<Eigen::MatrixXd> designs_;  // per-unit T x (p+1)
};

/// Per-unit linear quantile regression by majorize-minimize.
Eigen::VectorXd quantile_regression(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double tau,
                                    int max_iter = 200, double tol = 1e-9);

}  // namespace dsqp
