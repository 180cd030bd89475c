#include "dsqp/factor_select.hpp"

#include <cmath>
#include <limits>

#include "dsqp/errors.hpp"

namespace dsqp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

double switch_log_odds(const GibbsEngine& engine, const SamplerState& s, int k) {
  const auto& p = s.params;
  const double pi = engine.prior().pi_switch;
  const double prior_odds = std::log(pi) - std::log1p(-pi);
  if (std::isinf(prior_odds)) return prior_odds;
  // Residual with column k removed: R0 = target - sum_{j != k} s_j lambda_j f_j'.
  Eigen::MatrixXd r0 = engine.structural_residual(s);
  if (p.switches[k]) r0 += p.lambda.col(k) * p.f.col(k).transpose();
  const double q2 = p.sigma_q2;
  const double ll0 = -0.5 * r0.squaredNorm() / q2;
  const double ll1 = -0.5 * (r0 - p.lambda.col(k) * p.f.col(k).transpose()).squaredNorm() / q2;
  return prior_odds + (ll1 - ll0);
}

int draw_switch(const GibbsEngine& engine, SamplerState& s, int k, Rng& rng) {
  const double pi = engine.prior().pi_switch;
  const double lo = switch_log_odds(engine, s, k);
  double p1;
  if (lo == kInf || pi >= 1.0) {
    p1 = 1.0;
  } else if (lo == -kInf || pi <= 0.0) {
    p1 = 0.0;
  } else {
    // Normalize log(1) and log(odds) with the larger subtracted.
    const double m = std::max(0.0, lo);
    const double a = std::exp(lo - m), b = std::exp(-m);
    p1 = a / (a + b);
  }
  const int value = rng.uniform() < p1 ? 1 : 0;
  s.params.switches[k] = value;
  return value;
}

void draw_inactive_factors(const GibbsEngine& engine, SamplerState& s, Rng& rng) {
  auto& p = s.params;
  const int t_len = static_cast<int>(p.f.rows());
  const double sd0 = 1.0 / std::sqrt(engine.prior().h_f);
  for (int j = 0; j < p.r_max(); ++j) {
    if (p.switches[j]) continue;
    p.f(0, j) = sd0 * rng.normal();
    for (int t = 1; t < t_len; ++t) p.f(t, j) = p.phi[j] * p.f(t - 1, j) + rng.normal();
  }
}

Eigen::VectorXd posterior_factor_count(const std::vector<Eigen::VectorXi>& trace, int r_max) {
  Eigen::VectorXd tally = Eigen::VectorXd::Zero(r_max + 1);
  for (const auto& s : trace) {
    const int c = s.sum();
    if (c < 0 || c > r_max) throw DataError("switch vector longer than r_max");
    tally[c] += 1.0;
  }
  return posterior_factor_count(tally);
}

Eigen::VectorXd posterior_factor_count(const Eigen::VectorXd& count_tally) {
  const double total = count_tally.sum();
  if (!(total > 0.0)) return Eigen::VectorXd::Zero(count_tally.size());
  return count_tally / total;
}

}  // namespace dsqp
