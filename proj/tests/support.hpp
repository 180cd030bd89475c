#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "dsqp/rng.hpp"
#include "dsqp/spatial.hpp"

namespace dsqp::testing {

// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
inline double ks_distance(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double f = cdf(xs[k]);
    d = std::max({d, std::abs(f - k / n), std::abs((k + 1) / n - f)});
  }
  return d;
}

// CDF of a density tabulated on a uniform grid (trapezoid rule, normalized).
struct GridCdf {
  double lo = 0.0;
  double step = 1.0;
  std::vector<double> cum;

  GridCdf(double lo_, double hi, int n, const std::function<double(double)>& log_density) : lo(lo_) {
    step = (hi - lo) / (n - 1);
    std::vector<double> lp(n);
    double mx = -INFINITY;
    for (int k = 0; k < n; ++k) {
      lp[k] = log_density(lo + k * step);
      mx = std::max(mx, lp[k]);
    }
    cum.assign(n, 0.0);
    for (int k = 1; k < n; ++k)
      cum[k] = cum[k - 1] + 0.5 * step * (std::exp(lp[k - 1] - mx) + std::exp(lp[k] - mx));
    for (double& c : cum) c /= cum.back();
  }

  double operator()(double x) const {
    const double u = (x - lo) / step;
    if (u <= 0) return 0.0;
    const int k = static_cast<int>(u);
    if (k >= static_cast<int>(cum.size()) - 1) return 1.0;
    const double a = u - k;
    return (1 - a) * cum[k] + a * cum[k + 1];
  }
};

// Disjoint clusters of the given sizes; inside each, unit k links to its ring
// neighbours at distance 1..d. Row-normalized.
inline SpatialWeights ring_clusters(const std::vector<int>& sizes, int d, bool shuffle = false, std::uint64_t seed = 1) {
  int n = 0;
  for (int s : sizes) n += s;
  std::vector<int> label(n);
  for (int i = 0; i < n; ++i) label[i] = i;
  if (shuffle) {
    Rng rng(seed);
    for (int i = n - 1; i > 0; --i) std::swap(label[i], label[rng() % (i + 1)]);
  }
  std::vector<WeightTriplet> trips;
  int base = 0;
  for (int s : sizes) {
    for (int k = 0; k < s; ++k) {
      for (int off = 1; off <= std::min(d, s - 1); ++off) {
        const int a = base + k;
        const int b = base + (k + off) % s;
        const int c = base + (k - off + s) % s;
        trips.push_back({label[a], label[b], 1.0});
        if (c != b) trips.push_back({label[a], label[c], 1.0});
      }
    }
    base += s;
  }
  std::sort(trips.begin(), trips.end(), [](auto& x, auto& y) { return std::tie(x.i, x.j) < std::tie(y.i, y.j); });
  trips.erase(std::unique(trips.begin(), trips.end(), [](auto& x, auto& y) { return x.i == y.i && x.j == y.j; }),
              trips.end());
  return normalize_rows(SpatialWeights(n, trips));
}

// Dense I - diag(rho) W.
inline Eigen::MatrixXd dense_m(const SpatialWeights& w, const Eigen::VectorXd& rho) {
  return Eigen::MatrixXd::Identity(w.n(), w.n()) - rho.asDiagonal() * w.to_dense();
}

}  // namespace dsqp::testing
