#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <memory>

#include "dsqp/dgp.hpp"
#include "dsqp/distributions.hpp"
#include "dsqp/errors.hpp"
#include "dsqp/factor_select.hpp"
#include "dsqp/gibbs.hpp"
#include "support.hpp"

using namespace dsqp;
using dsqp::testing::GridCdf;
using dsqp::testing::ks_distance;

namespace {

struct Bench {
  PanelData data;
  SpatialWeights w;
  std::unique_ptr<GibbsEngine> engine;

  Bench(int n, int t_len, const SpatialWeights& weights, int r_max, std::uint64_t seed = 1,
        PriorConfig prior = PriorConfig{}, SamplerConfig cfg = SamplerConfig{}) {
    DgpConfig c;
    c.n_units = n;
    c.n_periods = t_len;
    c.n_factors = std::max(r_max, 1);
    c.seed = seed;
    w = weights;
    data = simulate_dgp(c, w).data;
    cfg.r_max = r_max;
    cfg.sigma_q2 = 0.5;
    engine = std::make_unique<GibbsEngine>(data, w, prior, cfg);
  }
};

SpatialWeights pair_plus_single() {
  return SpatialWeights(3, {{0, 1, 1.0}, {1, 0, 1.0}});
}

Eigen::MatrixXd lag(const Eigen::MatrixXd& q) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(q.rows(), q.cols());
  out.rightCols(q.cols() - 1) = q.leftCols(q.cols() - 1);
  return out;
}

struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

template <typename Draw>
Moments sample_moments(int n, Draw draw) {
  Eigen::VectorXd first = draw();
  Eigen::VectorXd sum = first;
  Eigen::MatrixXd outer = first * first.transpose();
  for (int k = 1; k < n; ++k) {
    const Eigen::VectorXd v = draw();
    sum += v;
    outer += v * v.transpose();
  }
  Moments m;
  m.mean = sum / n;
  m.cov = outer / n - m.mean * m.mean.transpose();
  return m;
}

void expect_moments(const Moments& got, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, int n,
                    double cov_tol = 0.05) {
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    EXPECT_LT(std::abs(got.mean[i] - mean[i]), 4.5 * std::sqrt(cov(i, i) / n)) << "mean " << i;
    for (Eigen::Index j = 0; j < mean.size(); ++j)
      EXPECT_LT(std::abs(got.cov(i, j) - cov(i, j)), cov_tol * std::sqrt(cov(i, i) * cov(j, j))) << i << "," << j;
  }
}

// Largest and smallest root of a u^2 + b u + c = 0.
std::pair<double, double> quad_roots(double a, double b, double c) {
  const double disc = std::sqrt(b * b - 4 * a * c);
  return {(-b - disc) / (2 * a), (-b + disc) / (2 * a)};
}

}  // namespace

// ---------------------------------------------------------------- rho kernel

TEST(RhoMixture, ModesMatchClosedForm) {
  const RhoConditional cases[] = {
      {4.0, 0.3, 0.8, 0.2, 10}, {50.0, -0.4, -0.5, 0.1, 40}, {2.0, 0.9, 1.5, 0.5, 3}, {400.0, 0.2, 0.05, 0.2, 200}};
  for (const auto& k : cases) {
    const auto mix = fit_rho_mixture(k);
    ASSERT_TRUE(mix.ok);
    ASSERT_EQ(mix.components, 2);
    // Stationary points in u = 1 - (r - rho_cur) g.
    const auto [u1, u2] = quad_roots(k.h_bar / k.g, -k.h_bar * (k.rho_cur - k.m_bar + 1.0 / k.g), -k.t_len * k.g);
    for (double u : {u1, u2}) {
      const double r = k.rho_cur + (1.0 - u) / k.g;
      const double sd = 1.0 / std::sqrt(k.h_bar + k.t_len * k.g * k.g / (u * u));
      int c = std::abs(mix.mean[0] - r) < std::abs(mix.mean[1] - r) ? 0 : 1;
      EXPECT_NEAR(mix.mean[c], r, 1e-7 * std::max(1.0, std::abs(r)));
      EXPECT_NEAR(mix.sd[c], sd, 1e-3 * sd);
    }
    EXPECT_NEAR(mix.weight[0] + mix.weight[1], 1.0, 1e-12);
    EXPECT_GE(mix.weight[0], mix.weight[1]);
  }
}

TEST(RhoMixture, ZeroCouplingIsExactGaussian) {
  const RhoConditional k{9.0, 0.25, 0.0, 0.1, 20};
  const auto mix = fit_rho_mixture(k);
  ASSERT_TRUE(mix.ok);
  EXPECT_EQ(mix.components, 1);
  EXPECT_DOUBLE_EQ(mix.mean[0], 0.25);
  EXPECT_DOUBLE_EQ(mix.sd[0], 1.0 / 3.0);
  EXPECT_NEAR(mix.log_density(0.25), -std::log(1.0 / 3.0) - 0.5 * std::log(2 * M_PI), 1e-12);
}

TEST(RhoStep, TargetsJointConditionalOfPair) {
  Bench st(3, 6, pair_plus_single(), 0, 3);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.5);
  Rng qr(21);
  for (int i = 0; i < 3; ++i)
    for (int t = 0; t < 6; ++t) s.latent.q(i, t) = 0.6 * qr.normal() + 0.5;
  s.params.sigma_q2 = 2.0;
  const Eigen::MatrixXd& q = s.latent.q;
  const Eigen::MatrixXd wd = st.w.to_dense();
  const Eigen::MatrixXd wq = wd * q, ql = lag(q), wql = wd * ql;
  const Eigen::MatrixXd xb = st.data.linear_predictor(s.params.b);
  double hb[2], mb[2];
  for (int i = 0; i < 2; ++i) {
    double sxx = 0, sxy = 0;
    for (int t = 0; t < 6; ++t) {
      const double ys = q(i, t) - s.params.gamma[i] * ql(i, t) - s.params.delta[i] * wql(i, t) - xb(i, t);
      sxx += wq(i, t) * wq(i, t);
      sxy += wq(i, t) * ys;
    }
    hb[i] = 1.0 + sxx / 2.0;
    mb[i] = sxy / 2.0 / hb[i];
  }
  // Joint kernel on a grid: det(I - diag(r) W) = 1 - r0 r1 for the linked pair.
  auto log_joint = [&](double r0, double r1) {
    return -0.5 * hb[0] * (r0 - mb[0]) * (r0 - mb[0]) - 0.5 * hb[1] * (r1 - mb[1]) * (r1 - mb[1]) +
           6.0 * std::log(std::abs(1.0 - r0 * r1));
  };
  const int g = 1201;
  const double lo = -5.0, hi = 5.0, step = (hi - lo) / (g - 1);
  std::vector<double> marg(g, 0.0);
  double mx = -INFINITY;
  for (int a = 0; a < g; ++a)
    for (int b = 0; b < g; ++b) mx = std::max(mx, log_joint(lo + a * step, lo + b * step));
  for (int a = 0; a < g; ++a)
    for (int b = 0; b < g; ++b) marg[a] += std::exp(log_joint(lo + a * step, lo + b * step) - mx);
  const GridCdf cdf(lo, hi, g, [&](double r) {
    const double u = (r - lo) / step;
    const int k = std::clamp(static_cast<int>(std::lround(u)), 0, g - 1);
    return std::log(std::max(marg[k], 1e-300));
  });
  Rng rng(8);
  std::vector<double> xs;
  for (int k = 0; k < 60000; ++k) {
    eng.draw_rho(s, rng, false);
    if (k >= 1000 && k % 5 == 0) xs.push_back(s.params.rho[0]);
  }
  EXPECT_LT(ks_distance(xs, cdf), 0.03);
  EXPECT_LT((s.solver->rho() - s.params.rho).norm(), 1e-15);
}

// ---------------------------------------------------------------- conjugate steps

TEST(ConjugateSteps, GammaDeltaAndBMatchRegressionPosterior) {
  Bench st(3, 8, pair_plus_single(), 1, 4);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.3);
  s.params.sigma_q2 = 0.7;
  s.params.rho << 0.2, -0.1, 0.3;
  s.solver->update(s.params.rho);
  const Eigen::MatrixXd& q = s.latent.q;
  const Eigen::MatrixXd wd = st.w.to_dense();
  const Eigen::MatrixXd wq = wd * q, ql = lag(q), wql = wd * ql;
  const Eigen::MatrixXd ft = s.params.factor_term();
  const int unit = 1, n = 30000;
  const auto& p = s.params;
  const Eigen::MatrixXd xb = st.data.linear_predictor(p.b);

  // gamma_1
  {
    const Eigen::VectorXd x = ql.row(unit).transpose();
    const Eigen::VectorXd y =
        (q.row(unit) - p.rho[unit] * wq.row(unit) - p.delta[unit] * wql.row(unit) - xb.row(unit) - ft.row(unit))
            .transpose();
    const double h = 1.0 + x.squaredNorm() / 0.7;
    Rng rng(1);
    SamplerState tmp = s;
    const auto got = sample_moments(n, [&] {
      eng.draw_gamma(tmp, rng);
      return Eigen::VectorXd::Constant(1, tmp.params.gamma[unit]);
    });
    expect_moments(got, Eigen::VectorXd::Constant(1, x.dot(y) / 0.7 / h), Eigen::MatrixXd::Constant(1, 1, 1.0 / h), n);
  }
  // delta_1
  {
    const Eigen::VectorXd x = wql.row(unit).transpose();
    const Eigen::VectorXd y =
        (q.row(unit) - p.rho[unit] * wq.row(unit) - p.gamma[unit] * ql.row(unit) - xb.row(unit) - ft.row(unit))
            .transpose();
    const double h = 1.0 + x.squaredNorm() / 0.7;
    Rng rng(2);
    SamplerState tmp = s;
    const auto got = sample_moments(n, [&] {
      eng.draw_delta(tmp, rng);
      return Eigen::VectorXd::Constant(1, tmp.params.delta[unit]);
    });
    expect_moments(got, Eigen::VectorXd::Constant(1, x.dot(y) / 0.7 / h), Eigen::MatrixXd::Constant(1, 1, 1.0 / h), n);
  }
  // b_1 with the default N(0, 100 I) prior
  {
    const Eigen::MatrixXd x = st.data.unit_design(unit);
    const Eigen::VectorXd y = (q.row(unit) - p.rho[unit] * wq.row(unit) - p.gamma[unit] * ql.row(unit) -
                               p.delta[unit] * wql.row(unit) - ft.row(unit))
                                  .transpose();
    const Eigen::MatrixXd h = 0.01 * Eigen::MatrixXd::Identity(2, 2) + x.transpose() * x / 0.7;
    const Eigen::MatrixXd cov = h.inverse();
    Rng rng(3);
    SamplerState tmp = s;
    const auto got = sample_moments(n, [&] {
      eng.draw_b(tmp, rng);
      return Eigen::VectorXd(tmp.params.b.row(unit).transpose());
    });
    expect_moments(got, cov * x.transpose() * y / 0.7, cov, n);
  }
}

TEST(ConjugateSteps, PhiIsTruncatedRegression) {
  Bench st(3, 12, pair_plus_single(), 2, 5);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.5);
  const Eigen::VectorXd f = s.params.f.col(1);
  const double h = f.head(11).squaredNorm(), m = f.tail(11).dot(f.head(11)) / h;
  const GridCdf cdf(-1.0, 1.0, 4001, [&](double x) { return -0.5 * h * (x - m) * (x - m); });
  Rng rng(4);
  std::vector<double> xs;
  for (int k = 0; k < 20000; ++k) {
    eng.draw_phi(s, rng);
    xs.push_back(s.params.phi[1]);
  }
  EXPECT_LT(ks_distance(xs, cdf), 0.015);
}

TEST(ConjugateSteps, LoadingsRespectIdentification) {
  Bench st(4, 10, SpatialWeights::empty(4), 2, 6);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.5);
  s.params.sigma_q2 = 3.0;  // weak data so the positivity constraint binds
  const Eigen::MatrixXd y = eng.factor_target(s);
  const Eigen::MatrixXd f = s.params.f;
  Rng rng(7);
  std::vector<double> xs;
  for (int k = 0; k < 20000; ++k) {
    eng.draw_loadings(s, rng);
    ASSERT_EQ(s.params.lambda(0, 1), 0.0);
    ASSERT_GT(s.params.lambda(0, 0), 0.0);
    ASSERT_GT(s.params.lambda(1, 1), 0.0);
    xs.push_back(s.params.lambda(0, 0));
  }
  // Unit 0 loads on the first factor only, truncated to positive values.
  const double h = 1.0 + f.col(0).squaredNorm() / 3.0, m = f.col(0).dot(y.row(0).transpose()) / 3.0 / h;
  const double sd = 1.0 / std::sqrt(h);
  const GridCdf cdf(0.0, std::max(m, 0.0) + 10 * sd, 8001, [&](double x) { return -0.5 * h * (x - m) * (x - m); });
  EXPECT_LT(ks_distance(xs, cdf), 0.015);
}

TEST(ConjugateSteps, InactiveLoadingsComeFromPrior) {
  PriorConfig prior;
  prior.h_lambda = 4.0;
  Bench st(5, 6, SpatialWeights::empty(5), 2, 6, prior);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.5);
  s.params.switches << 1, 0;
  Rng rng(9);
  std::vector<double> xs;
  for (int k = 0; k < 5000; ++k) {
    eng.draw_loadings(s, rng);
    for (int i = 0; i < 5; ++i) xs.push_back(s.params.lambda(i, 1));
  }
  EXPECT_LT(ks_distance(xs, [](double x) { return normal_cdf(2.0 * x); }), 0.01);
}

// ---------------------------------------------------------------- sigma and V

TEST(SigmaStep, ChainTargetsAldScalePosterior) {
  PriorConfig prior;
  prior.v_sigma = 3.0;
  prior.s_sigma = 2.0;
  Bench st(3, 10, pair_plus_single(), 0, 7, prior);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.25);
  double loss = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int t = 0; t < 10; ++t) {
      const double u = st.data.y(i, t) - s.latent.q(i, t);
      loss += u * (0.25 - (u < 0 ? 1.0 : 0.0));
    }
  auto log_post = [&](double sig) { return 2.0 * std::log(sig) - 2.0 * sig - 30.0 * std::log(sig) - loss / sig; };
  const GridCdf cdf(1e-4, 40.0, 200001, log_post);
  Rng rng(10);
  s.log_sigma_step = 0.35;
  std::vector<double> xs;
  int accepts = 0;
  for (int k = 0; k < 200000; ++k) {
    accepts += eng.draw_sigma(s, rng);
    if (k >= 2000 && k % 10 == 0) xs.push_back(s.params.sigma);
  }
  EXPECT_GT(accepts, 20000);
  EXPECT_LT(ks_distance(xs, cdf), 0.03);
}

TEST(VStep, MatchesMixingConditional) {
  Bench st(1, 2, SpatialWeights::empty(1), 0, 8);
  auto& eng = *st.engine;
  for (double tau : {0.2, 0.5, 0.9}) {
    SamplerState s = eng.initialize(tau);
    s.params.sigma = 0.8;
    s.latent.q(0, 0) = st.data.y(0, 0) - 0.7;
    const auto c = AldConstants::from_tau(tau);
    const double e = 0.7, sig = 0.8;
    auto log_v = [&](double v) {
      return -v - 0.5 * std::log(v) - std::pow(e - c.xi1 * sig * v, 2) / (2 * c.xi2 * c.xi2 * sig * sig * v);
    };
    const GridCdf cdf(1e-8, 40.0, 400001, log_v);
    Rng rng(11);
    std::vector<double> xs;
    for (int k = 0; k < 20000; ++k) {
      eng.draw_v(s, rng);
      xs.push_back(s.latent.v(0, 0));
    }
    EXPECT_LT(ks_distance(xs, cdf), 0.015) << tau;
  }
}

// ---------------------------------------------------------------- latent Q and factors

TEST(QStep, MatchesDenseJointPosterior) {
  const int N = 3, T = 4;
  Bench st(N, T, pair_plus_single(), 1, 9);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.4);
  auto& p = s.params;
  p.rho << 0.3, -0.2, 0.4;
  p.gamma << 0.5, 0.2, -0.3;
  p.delta << 0.1, 0.3, 0.0;
  p.sigma = 0.6;
  p.sigma_q2 = 0.4;
  s.solver->update(p.rho);
  Rng vr(3);
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t) s.latent.v(i, t) = 0.2 + vr.uniform();

  const Eigen::MatrixXd wd = st.w.to_dense();
  const Eigen::MatrixXd M = Eigen::MatrixXd::Identity(N, N) - p.rho.asDiagonal() * wd;
  const Eigen::MatrixXd G = Eigen::MatrixXd(p.gamma.asDiagonal()) + p.delta.asDiagonal() * wd;
  const Eigen::MatrixXd drive = st.data.linear_predictor(p.b) + p.factor_term();
  // Q stacked by period; M Q_t - G Q_{t-1} = m_t + e_t.
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(N * T, N * T);
  Eigen::VectorXd mvec(N * T);
  for (int t = 0; t < T; ++t) {
    L.block(t * N, t * N, N, N) = M;
    if (t > 0) L.block(t * N, (t - 1) * N, N, N) = -G;
    mvec.segment(t * N, N) = drive.col(t);
  }
  const Eigen::MatrixXd Li = L.inverse();
  const Eigen::VectorXd mu = Li * mvec;
  const Eigen::MatrixXd sigma_prior = p.sigma_q2 * Li * Li.transpose();
  const auto c = s.ald;
  Eigen::VectorXd z(N * T), r(N * T);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < N; ++i) {
      z[t * N + i] = st.data.y(i, t) - c.xi1 * p.sigma * s.latent.v(i, t);
      r[t * N + i] = c.xi2 * c.xi2 * p.sigma * p.sigma * s.latent.v(i, t);
    }
  const Eigen::MatrixXd prec = sigma_prior.inverse() + Eigen::MatrixXd(r.cwiseInverse().asDiagonal());
  const Eigen::MatrixXd cov = prec.inverse();
  const Eigen::VectorXd mean = cov * (sigma_prior.inverse() * mu + r.cwiseInverse().cwiseProduct(z));

  Rng rng(12);
  const int n = 30000;
  std::uint64_t draw = 0;
  const auto got = sample_moments(n, [&] {
    // Block streams derive from the parent key, so each draw needs its own parent.
    Rng step = rng.substream(draw++);
    eng.draw_q(s, step);
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(s.latent.q.data(), N * T));
  });
  expect_moments(got, mean, cov, n);
}

TEST(FactorStep, MatchesDenseJointPosterior) {
  const int N = 4, T = 5;
  Bench st(N, T, SpatialWeights::empty(N), 2, 10);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.5);
  auto& p = s.params;
  p.switches << 0, 1;
  p.phi << 0.3, 0.6;
  p.sigma_q2 = 0.8;
  const Eigen::MatrixXd y = eng.factor_target(s);
  const Eigen::VectorXd lam = p.lambda.col(1);
  Eigen::MatrixXd L = Eigen::MatrixXd::Identity(T, T), Qb = Eigen::MatrixXd::Identity(T, T);
  for (int t = 1; t < T; ++t) L(t, t - 1) = -0.6;
  const Eigen::MatrixXd Li = L.inverse();
  const Eigen::MatrixXd prior_prec = (Li * Qb * Li.transpose()).inverse();
  const Eigen::MatrixXd prec = prior_prec + lam.squaredNorm() / 0.8 * Eigen::MatrixXd::Identity(T, T);
  const Eigen::MatrixXd cov = prec.inverse();
  const Eigen::VectorXd mean = cov * (y.transpose() * lam / 0.8);
  Rng rng(13);
  const int n = 30000;
  const Eigen::VectorXd inactive = p.f.col(0);
  const auto got = sample_moments(n, [&] {
    eng.draw_factors(s, rng);
    return Eigen::VectorXd(s.params.f.col(1));
  });
  expect_moments(got, mean, cov, n);
  EXPECT_EQ(s.params.f.col(0), inactive);
}

// ---------------------------------------------------------------- sweep level

TEST(Sweep, DeterministicGivenSeed) {
  Bench st(6, 10, dsqp::testing::ring_clusters({4, 2}, 1), 2, 11);
  auto& eng = *st.engine;
  SamplerState a = eng.initialize(0.5), b = eng.initialize(0.5);
  for (int k = 0; k < 5; ++k) {
    eng.sweep(a, true);
    eng.sweep(b, true);
  }
  EXPECT_EQ(a.latent.q, b.latent.q);
  EXPECT_EQ(a.params.rho, b.params.rho);
  EXPECT_EQ(a.params.switches, b.params.switches);
}

TEST(Sweep, PiOneMatchesSelectionDisabled) {
  PriorConfig prior;
  prior.pi_switch = 1.0;
  SamplerConfig on, off;
  off.factor_select = false;
  Bench a(6, 10, dsqp::testing::ring_clusters({4, 2}, 1), 2, 12, prior, on);
  Bench b(6, 10, dsqp::testing::ring_clusters({4, 2}, 1), 2, 12, prior, off);
  SamplerState sa = a.engine->initialize(0.5), sb = b.engine->initialize(0.5);
  for (int k = 0; k < 6; ++k) {
    a.engine->sweep(sa, true);
    b.engine->sweep(sb, true);
  }
  EXPECT_EQ(sa.params.switches.sum(), 2);
  EXPECT_EQ(sa.latent.q, sb.latent.q);
  EXPECT_EQ(sa.params.lambda, sb.params.lambda);
}

TEST(Sweep, FailuresCarryStepIdentity) {
  Bench st(3, 6, pair_plus_single(), 1, 13);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.5);
  s.params.sigma_q2 = std::nan("");
  s.sigma_q2_base = s.params.sigma_q2;
  try {
    eng.sweep(s, false);
    FAIL() << "expected a SweepError";
  } catch (const SweepError& e) {
    EXPECT_GE(e.step(), 1);
    EXPECT_LE(e.step(), 10);
  }
}

TEST(Sweep, DiagnosticsAreConsistent) {
  Bench st(6, 10, dsqp::testing::ring_clusters({4, 2}, 1), 2, 14);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.7);
  const auto d = eng.sweep(s, true);
  EXPECT_EQ(d.sweep, 0);
  EXPECT_EQ(s.sweep, 1);
  EXPECT_GE(d.r2_randomization, 0.0);
  EXPECT_LE(d.r2_randomization, 1.0);
  double ll = 0.0;
  for (int i = 0; i < 6; ++i)
    for (int t = 0; t < 10; ++t) {
      const double u = st.data.y(i, t) - s.latent.q(i, t);
      ll += std::log(0.7 * 0.3 / s.params.sigma) - u * (0.7 - (u < 0 ? 1.0 : 0.0)) / s.params.sigma;
    }
  EXPECT_NEAR(d.loglik_pseudo, ll, 1e-8 * std::abs(ll));
  EXPECT_EQ(d.active_factors, s.params.active_factors());
}

TEST(Sweep, DecayShrinksRandomizationVariance) {
  SamplerConfig cfg;
  cfg.decay = 0.9;
  Bench st(3, 6, pair_plus_single(), 0, 15, PriorConfig{}, cfg);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.5);
  const double base = s.sigma_q2_base;
  for (int k = 0; k < 4; ++k) eng.sweep(s, false);
  EXPECT_NEAR(s.params.sigma_q2, base * std::pow(0.9, 3), 1e-15 * base);
}

TEST(Tuning, LargerRandomizationLowersFit) {
  SamplerConfig cfg;
  cfg.tune_sweeps = 10;
  cfg.tune_iterations = 6;
  cfg.target_r2 = 0.9;
  Bench st(8, 20, dsqp::testing::ring_clusters({5, 3}, 1), 1, 16, PriorConfig{}, cfg);
  auto& eng = *st.engine;
  SamplerState s = eng.initialize(0.5);
  auto r2_at = [&](double q2) {
    SamplerState t = s;
    t.params.sigma_q2 = q2;
    t.sigma_q2_base = q2;
    double acc = 0.0;
    for (int k = 0; k < 20; ++k) acc += k >= 10 ? eng.sweep(t, true).r2_randomization : (eng.sweep(t, true), 0.0);
    return acc / 10.0;
  };
  EXPECT_GT(r2_at(1e-4), r2_at(10.0));
  const double chosen = eng.tune_sigma_q2(s);
  EXPECT_GT(chosen, 0.0);
  EXPECT_DOUBLE_EQ(s.params.sigma_q2, chosen);
}

// ---------------------------------------------------------------- initialization

TEST(Initialization, QuantileRegressionIsOptimal) {
  Rng rng(17);
  const int n = 300;
  Eigen::MatrixXd x(n, 2);
  Eigen::VectorXd y(n);
  for (int k = 0; k < n; ++k) {
    x(k, 0) = 1.0;
    x(k, 1) = rng.normal();
    y[k] = 1.0 + 2.0 * x(k, 1) + std::exp(rng.normal());
  }
  for (double tau : {0.1, 0.5, 0.9}) {
    const Eigen::VectorXd beta = quantile_regression(x, y, tau);
    auto loss = [&](const Eigen::VectorXd& b) {
      double s = 0;
      for (int k = 0; k < n; ++k) s += check_loss(y[k] - x.row(k).dot(b), tau);
      return s;
    };
    const double best = loss(beta);
    for (int k = 0; k < 400; ++k) {
      Eigen::VectorXd d(2);
      d << rng.normal(), rng.normal();
      EXPECT_LE(best, loss(beta + 1e-2 * d) + 1e-4 * best);
    }
  }
  // Intercept only: the sample quantile.
  Eigen::VectorXd v = y;
  std::sort(v.data(), v.data() + n);
  const Eigen::VectorXd q = quantile_regression(Eigen::MatrixXd::Ones(n, 1), y, 0.25);
  EXPECT_GE(q[0], v[74] - 1e-4);
  EXPECT_LE(q[0], v[75] + 1e-4);
}

TEST(Initialization, StartsIdentifiedAndStationary) {
  Bench st(10, 30, dsqp::testing::ring_clusters({6, 4}, 2), 3, 18);
  auto& eng = *st.engine;
  const SamplerState s = eng.initialize(0.5);
  const auto& p = s.params;
  for (int j = 0; j < 3; ++j) {
    EXPECT_GT(p.lambda(j, j), 0.0);
    for (int i = 0; i < j; ++i) EXPECT_EQ(p.lambda(i, j), 0.0);
    EXPECT_LE(std::abs(p.phi[j]), 0.95);
  }
  EXPECT_EQ(p.switches.sum(), 3);
  EXPECT_TRUE(check_stationarity(p.rho, p.delta, p.gamma, st.w).stationary);
  EXPECT_GT(p.sigma, 0.0);
  EXPECT_TRUE((s.latent.v.array() == 1.0).all());
  EXPECT_LT((s.latent.q - quantile_recursion(p, st.data, st.w)).norm(), 1e-12);
  // Principal components of the residual reproduce it up to rotation.
  const Eigen::MatrixXd fit = p.lambda * p.f.transpose();
  EXPECT_TRUE(fit.allFinite());
}

TEST(Configs, JsonRoundTripAndValidation) {
  SamplerConfig c;
  c.n_sweeps = 30;
  c.sigma_q2_mode = SigmaQ2Mode::Fixed;
  c.toggles.rho = false;
  const auto back = SamplerConfig::from_json(c.to_json());
  EXPECT_EQ(back.n_sweeps, 30);
  EXPECT_EQ(back.sigma_q2_mode, SigmaQ2Mode::Fixed);
  EXPECT_FALSE(back.toggles.rho);
  auto bad = c.to_json();
  bad["thinning"] = 0;
  EXPECT_THROW(SamplerConfig::from_json(bad), ConfigError);
  bad = c.to_json();
  bad["sigma_q2_mode"] = "auto";
  EXPECT_THROW(SamplerConfig::from_json(bad), ConfigError);

  PriorConfig p;
  p.h_rho = 3.0;
  p.m_b = Eigen::Vector2d(1.0, 2.0);
  p.H_b = Eigen::Matrix2d::Identity();
  PriorConfig pb = PriorConfig::from_json(p.to_json());
  pb.resolve(2);
  EXPECT_DOUBLE_EQ(pb.h_rho, 3.0);
  EXPECT_EQ(pb.m_b, p.m_b);
  PriorConfig scalar = PriorConfig::from_json({{"H_b", 0.5}});
  scalar.resolve(3);
  EXPECT_EQ(scalar.H_b, 0.5 * Eigen::MatrixXd::Identity(3, 3));
  PriorConfig neg;
  neg.h_f = -1.0;
  EXPECT_THROW(neg.resolve(1), ConfigError);
  PriorConfig wrong;
  wrong.m_b = Eigen::Vector3d::Zero();
  EXPECT_THROW(wrong.resolve(2), ConfigError);
}
