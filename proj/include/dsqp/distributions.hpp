#pragma once

#include "dsqp/rng.hpp"

namespace dsqp {

double normal_cdf(double z);
/// Upper tail 1 - Phi(z), accurate far into the tail.
double normal_sf(double z);
double normal_quantile(double p);

/// Normal(mean, sd^2) truncated to [lo, hi]; either bound may be infinite.
/// Inverse-CDF inside the bulk, exponential rejection in the deep tail.
double truncated_normal(Rng& rng, double mean, double sd, double lo, double hi);

/// Inverse Gaussian IG(mu, lambda) by the Michael-Schucany-Haas transformation.
double inverse_gaussian(Rng& rng, double mu, double lambda);

/// log density of Gamma(shape, rate) at x > 0.
double gamma_log_pdf(double x, double shape, double rate);

/// Check loss q_tau(u) = u (tau - 1{u <= 0}).
inline double check_loss(double u, double tau) { return u * (tau - (u <= 0.0 ? 1.0 : 0.0)); }

/// log of the asymmetric Laplace density tau(1-tau)/sigma * exp(-q_tau(e)/sigma).
double ald_log_pdf(double e, double tau, double sigma);

}  // namespace dsqp
