#include <cmath>
#include <vector>

#include "gtest/gtest.h"

#include "dsqp/distributions.hpp"
#include "support.hpp"

using dsqp::Rng;
using dsqp::testing::ks_distance;

namespace {

double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

struct TnCase {
  double mean, sd, lo, hi;
};

}  // namespace

TEST(Distributions, NormalQuantileInvertsCdf) {
  for (double p : {1e-10, 0.001, 0.2, 0.5, 0.77, 0.999999}) EXPECT_NEAR(dsqp::normal_cdf(dsqp::normal_quantile(p)), p, 1e-12 + 1e-9 * p);
  EXPECT_NEAR(dsqp::normal_sf(10.0), 7.619853024160527e-24, 1e-35);
}

TEST(Distributions, TruncatedNormalMatchesCdf) {
  const std::vector<TnCase> cases = {{0, 1, -1, 2},     {1, 2, 0, INFINITY},  {0, 1, 3, 4},
                                     {0, 1, -INFINITY, -5}, {0, 1, 35, 36},  {-2, 0.5, 0, 1},
                                     {5, 1, -1, 1}};
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto [m, s, lo, hi] = cases[c];
    Rng rng(100 + c);
    std::vector<double> xs(40000);
    for (double& x : xs) {
      x = dsqp::truncated_normal(rng, m, s, lo, hi);
      ASSERT_GT(x, lo);
      ASSERT_LT(x, hi);
    }
    // Conditional CDF computed in log space to survive the far tail.
    auto cdf = [&](double x) {
      const double a = (lo - m) / s, b = (hi - m) / s, z = (x - m) / s;
      if (a > 0) {
        const double qa = std::erfc(a / std::sqrt(2.0)), qz = std::erfc(z / std::sqrt(2.0)),
                     qb = std::isinf(b) ? 0.0 : std::erfc(b / std::sqrt(2.0));
        return (qa - qz) / (qa - qb);
      }
      return (phi(z) - phi(a)) / (phi(b) - phi(a));
    };
    EXPECT_LT(ks_distance(xs, cdf), 0.012) << "case " << c;
  }
}

TEST(Distributions, InverseGaussianMatchesCdf) {
  for (auto [mu, lambda] : std::vector<std::pair<double, double>>{{1, 1}, {0.01, 5}, {20, 0.5}, {3, 300}}) {
    Rng rng(7);
    std::vector<double> xs(40000);
    double mean = 0;
    for (double& x : xs) {
      x = dsqp::inverse_gaussian(rng, mu, lambda);
      ASSERT_GT(x, 0.0);
      mean += x / xs.size();
    }
    auto cdf = [&](double x) {
      const double r = std::sqrt(lambda / x);
      const double tail = std::log(phi(-r * (x / mu + 1))) + 2 * lambda / mu;
      return phi(r * (x / mu - 1)) + std::exp(tail);
    };
    EXPECT_LT(ks_distance(xs, cdf), 0.012) << mu << " " << lambda;
    EXPECT_NEAR(mean, mu, 6 * std::sqrt(mu * mu * mu / lambda / xs.size()));
  }
}

TEST(Distributions, GammaLogPdf) {
  EXPECT_NEAR(dsqp::gamma_log_pdf(2.0, 3.0, 0.5), std::log(std::pow(0.5, 3) / std::tgamma(3.0) * 4.0 * std::exp(-1.0)), 1e-12);
  EXPECT_EQ(dsqp::gamma_log_pdf(-1.0, 2, 2), -INFINITY);
}

TEST(Distributions, AldIntegratesToOneWithQuantileAtZero) {
  for (double tau : {0.01, 0.3, 0.5, 0.95}) {
    const double sigma = 0.7;
    double below = 0, total = 0;
    const double h = 1e-3;
    const double span = 30 * sigma / std::min(tau, 1 - tau);
    for (double e = -span; e < span; e += h) {
      const double p = std::exp(dsqp::ald_log_pdf(e + 0.5 * h, tau, sigma)) * h;
      total += p;
      if (e + 0.5 * h < 0) below += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-4) << tau;
    EXPECT_NEAR(below, tau, 1e-4) << tau;
  }
}

TEST(Distributions, CheckLoss) {
  EXPECT_DOUBLE_EQ(dsqp::check_loss(2.0, 0.25), 0.5);
  EXPECT_DOUBLE_EQ(dsqp::check_loss(-2.0, 0.25), 1.5);
  EXPECT_DOUBLE_EQ(dsqp::check_loss(0.0, 0.25), 0.0);
}
