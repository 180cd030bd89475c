#include "dsqp/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>

namespace dsqp {

namespace {

const boost::math::normal_distribution<double> kStdNormal{0.0, 1.0};

// Standard normal restricted to [a, b] with 0 <= a < b.
double upper_tail_truncated(Rng& rng, double a, double b) {
  if (a < 30.0) {
    const double qa = normal_sf(a);
    const double qb = normal_sf(b);
    const double u = qb + rng.uniform() * (qa - qb);
    const double z = boost::math::quantile(boost::math::complement(kStdNormal, u));
    return std::clamp(z, a, b);
  }
  // Robert (1995) exponential proposal with the optimal rate.
  const double rate = 0.5 * (a + std::sqrt(a * a + 4.0));
  for (;;) {
    const double z = a - std::log(rng.uniform()) / rate;
    if (z > b) continue;
    const double d = z - rate;
    if (rng.uniform() <= std::exp(-0.5 * d * d)) return z;
  }
}

double standard_truncated(Rng& rng, double a, double b) {
  if (b <= 0.0) return -standard_truncated(rng, -b, -a);
  if (a >= 0.0) return upper_tail_truncated(rng, a, b);
  const double pa = normal_cdf(a);
  const double pb = normal_cdf(b);
  const double u = pa + rng.uniform() * (pb - pa);
  return std::clamp(normal_quantile(u), a, b);
}

}  // namespace

double normal_cdf(double z) {
  if (std::isinf(z)) return z > 0 ? 1.0 : 0.0;
  return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

double normal_sf(double z) {
  if (std::isinf(z)) return z > 0 ? 0.0 : 1.0;
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

double normal_quantile(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  return boost::math::quantile(kStdNormal, p);
}

double truncated_normal(Rng& rng, double mean, double sd, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("truncated_normal: empty interval");
  if (!(sd > 0.0)) return std::clamp(mean, lo, hi);
  const double a = (lo - mean) / sd;
  const double b = (hi - mean) / sd;
  const double x = mean + sd * standard_truncated(rng, a, b);
  // Guard against rounding onto an open boundary.
  if (x <= lo) return std::nextafter(lo, hi);
  if (x >= hi) return std::nextafter(hi, lo);
  return x;
}

double inverse_gaussian(Rng& rng, double mu, double lambda) {
  if (!(mu > 0.0) || !(lambda > 0.0)) throw std::invalid_argument("inverse_gaussian: non-positive parameter");
  const double z = rng.normal();
  const double y = z * z;
  const double my = mu * y;
  // mu + mu^2 y / (2 lambda) - mu/(2 lambda) sqrt(4 mu lambda y + mu^2 y^2), rewritten without cancellation.
  const double x = my > 0.0 ? mu - 2.0 * mu * my / (my + std::sqrt(my * my + 4.0 * lambda * my)) : mu;
  if (rng.uniform() <= mu / (mu + x)) return x;
  return mu * mu / x;
}

double gamma_log_pdf(double x, double shape, double rate) {
  if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

double ald_log_pdf(double e, double tau, double sigma) {
  return std::log(tau * (1.0 - tau) / sigma) - check_loss(e, tau) / sigma;
}

}  // namespace dsqp
