#include "dsqp/gibbs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "dsqp/distributions.hpp"
#include "dsqp/errors.hpp"
#include "dsqp/factor_select.hpp"
#include "dsqp/ffbs.hpp"

namespace dsqp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Step identifiers double as RNG substream tags.
enum Step : std::uint64_t {
  kGamma = 1, kDelta, kB, kRho, kFactors, kPhi, kLoadings, kSigma, kV, kQ, kSwitches = 50
};

const char* step_name(int step) {
  switch (step) {
    case kGamma: return "gamma";
    case kDelta: return "delta";
    case kB: return "b";
    case kRho: return "rho";
    case kFactors: return "factors";
    case kPhi: return "phi";
    case kLoadings: return "loadings";
    case kSigma: return "sigma";
    case kV: return "v";
    case kQ: return "q";
    default: return "switches";
  }
}

// Draw from N(H^{-1} c, H^{-1}) using the Cholesky factor of the precision.
Eigen::VectorXd draw_precision_form(const Eigen::MatrixXd& h, const Eigen::VectorXd& c, Rng& rng) {
  Eigen::MatrixXd hs = 0.5 * (h + h.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(hs);
  if (llt.info() != Eigen::Success) {
    hs.diagonal().array() += 1e-10 * std::max(1.0, hs.diagonal().cwiseAbs().maxCoeff());
    llt.compute(hs);
    if (llt.info() != Eigen::Success) throw IllConditioned("posterior precision is not positive definite");
  }
  const Eigen::VectorXd mean = llt.solve(c);
  Eigen::VectorXd z(h.rows());
  for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = rng.normal();
  return mean + llt.matrixU().solve(z);
}

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -kInf) return -kInf;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

std::vector<int> active_columns(const Eigen::VectorXi& s) {
  std::vector<int> a;
  for (int j = 0; j < s.size(); ++j)
    if (s[j]) a.push_back(j);
  return a;
}

// Golden-section maximization of a unimodal function on [lo, hi].
template <typename F>
double golden_max(F f, double lo, double hi, int iters = 200) {
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - invphi * (b - a), d = a + invphi * (b - a);
  double fc = f(c), fd = f(d);
  for (int k = 0; k < iters && (b - a) > 1e-14 * std::max(1.0, std::abs(a) + std::abs(b)); ++k) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - invphi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + invphi * (b - a);
      fd = f(d);
    }
  }
  return fc >= fd ? c : d;
}

}  // namespace

// ---------------------------------------------------------------- configs

void PriorConfig::resolve(int n_covariates) {
  if (m_b.size() == 0) m_b = Eigen::VectorXd::Zero(n_covariates);
  if (H_b.size() == 0) H_b = h_b * Eigen::MatrixXd::Identity(n_covariates, n_covariates);
  if (m_b.size() != n_covariates || H_b.rows() != n_covariates || H_b.cols() != n_covariates)
    throw ConfigError("prior m_b / H_b do not match the number of covariates");
  for (double h : {h_gamma, h_delta, h_rho, h_f, h_lambda, v_sigma, s_sigma})
    if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("prior precisions and Gamma parameters must be positive");
  if (!(pi_switch >= 0.0 && pi_switch <= 1.0)) throw ConfigError("pi_switch must lie in [0, 1]");
  if ((H_b - H_b.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, H_b.cwiseAbs().maxCoeff()))
    throw ConfigError("H_b must be symmetric");
  if (Eigen::LLT<Eigen::MatrixXd>(H_b).info() != Eigen::Success) throw ConfigError("H_b must be positive definite");
}

nlohmann::json PriorConfig::to_json() const {
  nlohmann::json j = {{"m_gamma", m_gamma}, {"h_gamma", h_gamma}, {"m_delta", m_delta},   {"h_delta", h_delta},
                      {"m_rho", m_rho},     {"h_rho", h_rho},     {"h_f", h_f},           {"h_lambda", h_lambda},
                      {"v_sigma", v_sigma}, {"s_sigma", s_sigma}, {"pi_switch", pi_switch}};
  j["m_b"] = std::vector<double>(m_b.data(), m_b.data() + m_b.size());
  auto hb = nlohmann::json::array();
  for (Eigen::Index r = 0; r < H_b.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(H_b.cols()));
    for (Eigen::Index c = 0; c < H_b.cols(); ++c) row[static_cast<std::size_t>(c)] = H_b(r, c);
    hb.push_back(row);
  }
  j["H_b"] = hb;
  return j;
}

PriorConfig PriorConfig::from_json(const nlohmann::json& j) {
  PriorConfig p;
  p.m_gamma = j.value("m_gamma", p.m_gamma);
  p.h_gamma = j.value("h_gamma", p.h_gamma);
  p.m_delta = j.value("m_delta", p.m_delta);
  p.h_delta = j.value("h_delta", p.h_delta);
  p.m_rho = j.value("m_rho", p.m_rho);
  p.h_rho = j.value("h_rho", p.h_rho);
  p.h_f = j.value("h_f", p.h_f);
  p.h_lambda = j.value("h_lambda", p.h_lambda);
  p.v_sigma = j.value("v_sigma", p.v_sigma);
  p.s_sigma = j.value("s_sigma", p.s_sigma);
  p.pi_switch = j.value("pi_switch", p.pi_switch);
  if (j.contains("m_b")) {
    const auto v = j.at("m_b").get<std::vector<double>>();
    p.m_b = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (j.contains("H_b")) {
    const auto& hb = j.at("H_b");
    if (hb.is_number()) {
      p.h_b = hb.get<double>();
      p.H_b.resize(0, 0);
    } else {
      const auto rows = hb.get<std::vector<std::vector<double>>>();
      p.H_b.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.size()) throw ConfigError("H_b must be square");
        for (std::size_t c = 0; c < rows.size(); ++c)
          p.H_b(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
      }
    }
  }
  return p;
}

nlohmann::json StepToggles::to_json() const {
  return {{"gamma", gamma}, {"delta", delta},       {"b", b},         {"rho", rho},
          {"factors", factors}, {"phi", phi},       {"loadings", loadings}, {"sigma", sigma},
          {"v", v},         {"q", q},               {"switches", switches}};
}

StepToggles StepToggles::from_json(const nlohmann::json& j) {
  StepToggles t;
  t.gamma = j.value("gamma", t.gamma);
  t.delta = j.value("delta", t.delta);
  t.b = j.value("b", t.b);
  t.rho = j.value("rho", t.rho);
  t.factors = j.value("factors", t.factors);
  t.phi = j.value("phi", t.phi);
  t.loadings = j.value("loadings", t.loadings);
  t.sigma = j.value("sigma", t.sigma);
  t.v = j.value("v", t.v);
  t.q = j.value("q", t.q);
  t.switches = j.value("switches", t.switches);
  return t;
}

void SamplerConfig::validate() const {
  if (n_sweeps < 0 || n_burnin < 0) throw ConfigError("n_sweeps and n_burnin must be non-negative");
  if (thinning < 1) throw ConfigError("thinning must be at least 1");
  if (r_max < 0) throw ConfigError("r_max must be non-negative");
  if (sigma_q2 < 0.0 || !std::isfinite(sigma_q2)) throw ConfigError("sigma_q2 must be non-negative");
  if (!(target_r2 > 0.0 && target_r2 < 1.0)) throw ConfigError("target_r2 must lie in (0, 1)");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay must lie in (0, 1]");
  if (tune_sweeps < 2 || tune_iterations < 1) throw ConfigError("tuning needs at least 2 sweeps and 1 iteration");
  if (sigma_init < 0.0) throw ConfigError("sigma_init must be non-negative");
}

nlohmann::json SamplerConfig::to_json() const {
  return {{"n_sweeps", n_sweeps},
          {"n_burnin", n_burnin},
          {"thinning", thinning},
          {"seed", seed},
          {"r_max", r_max},
          {"factor_select", factor_select},
          {"sigma_q2_mode", sigma_q2_mode == SigmaQ2Mode::Fixed ? "fixed" : "target_r2"},
          {"sigma_q2", sigma_q2},
          {"target_r2", target_r2},
          {"decay", decay},
          {"tune_sweeps", tune_sweeps},
          {"tune_iterations", tune_iterations},
          {"sigma_init", sigma_init},
          {"toggles", toggles.to_json()}};
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
  SamplerConfig c;
  c.n_sweeps = j.value("n_sweeps", c.n_sweeps);
  c.n_burnin = j.value("n_burnin", c.n_burnin);
  c.thinning = j.value("thinning", c.thinning);
  c.seed = j.value("seed", c.seed);
  c.r_max = j.value("r_max", c.r_max);
  c.factor_select = j.value("factor_select", c.factor_select);
  const std::string mode = j.value("sigma_q2_mode", std::string("target_r2"));
  if (mode == "fixed") {
    c.sigma_q2_mode = SigmaQ2Mode::Fixed;
  } else if (mode == "target_r2") {
    c.sigma_q2_mode = SigmaQ2Mode::TargetR2;
  } else {
    throw ConfigError("sigma_q2_mode must be 'fixed' or 'target_r2'");
  }
  c.sigma_q2 = j.value("sigma_q2", c.sigma_q2);
  c.target_r2 = j.value("target_r2", c.target_r2);
  c.decay = j.value("decay", c.decay);
  c.tune_sweeps = j.value("tune_sweeps", c.tune_sweeps);
  c.tune_iterations = j.value("tune_iterations", c.tune_iterations);
  c.sigma_init = j.value("sigma_init", c.sigma_init);
  if (j.contains("toggles")) c.toggles = StepToggles::from_json(j.at("toggles"));
  c.validate();
  return c;
}

// ---------------------------------------------------------------- rho kernel

double RhoConditional::log_kernel(double r) const {
  const double u = 1.0 - (r - rho_cur) * g;
  if (u == 0.0 || !std::isfinite(r)) return -kInf;
  return -0.5 * h_bar * (r - m_bar) * (r - m_bar) + t_len * std::log(std::abs(u));
}

double RhoMixture::log_density(double r) const {
  double out = -kInf;
  for (int c = 0; c < components; ++c) {
    if (weight[c] <= 0.0) continue;
    const double z = (r - mean[c]) / sd[c];
    out = log_sum_exp(out, std::log(weight[c]) - 0.5 * z * z - std::log(sd[c]) - 0.5 * std::log(2.0 * std::numbers::pi));
  }
  return out;
}

double RhoMixture::draw(Rng& rng) const {
  const int c = (components == 2 && rng.uniform() < weight[1]) ? 1 : 0;
  return mean[c] + sd[c] * rng.normal();
}

RhoMixture fit_rho_mixture(const RhoConditional& k) {
  RhoMixture mix;
  const double sd0 = 1.0 / std::sqrt(k.h_bar);
  if (k.g == 0.0 || k.t_len == 0) {
    mix.components = 1;
    mix.mean[0] = k.m_bar;
    mix.sd[0] = sd0;
    mix.ok = true;
    return mix;
  }
  const double singular = k.rho_cur + 1.0 / k.g;
  const double span = std::abs(k.m_bar - singular) + 12.0 * sd0 + 2.0 * std::sqrt(k.t_len / k.h_bar) + 1.0;
  double log_w[2];
  for (int side = 0; side < 2; ++side) {
    const double dir = side == 0 ? -1.0 : 1.0;
    auto at = [&](double d) { return k.log_kernel(singular + dir * d); };
    // Bracketing grid, log-spaced towards the singular point.
    const int n_grid = 61;
    double best = -kInf;
    int best_i = 0;
    std::vector<double> ds(n_grid);
    for (int i = 0; i < n_grid; ++i) {
      ds[i] = span * std::pow(10.0, -0.25 * i);
      const double v = at(ds[i]);
      if (v > best) {
        best = v;
        best_i = i;
      }
    }
    const double hi = best_i == 0 ? span : ds[best_i - 1];
    const double lo = best_i == n_grid - 1 ? 0.0 : ds[best_i + 1];
    const double d_mode = golden_max(at, lo, hi);
    const double mode = singular + dir * d_mode;
    const double k0 = at(d_mode);
    const double h = 1e-3 * std::min(d_mode, sd0);
    const double curv = (k.log_kernel(mode + h) - 2.0 * k0 + k.log_kernel(mode - h)) / (h * h);
    if (!std::isfinite(k0) || !(curv < 0.0) || !std::isfinite(curv)) return mix;  // ok == false
    mix.mean[side] = mode;
    mix.sd[side] = 1.0 / std::sqrt(-curv);
    log_w[side] = k0 + std::log(mix.sd[side]);
  }
  const double m = std::max(log_w[0], log_w[1]);
  const double w0 = std::exp(log_w[0] - m), w1 = std::exp(log_w[1] - m);
  mix.components = 2;
  mix.weight[0] = w0 / (w0 + w1);
  mix.weight[1] = w1 / (w0 + w1);
  // Keep the dominant component first.
  if (mix.weight[1] > mix.weight[0]) {
    std::swap(mix.mean[0], mix.mean[1]);
    std::swap(mix.sd[0], mix.sd[1]);
    std::swap(mix.weight[0], mix.weight[1]);
  }
  mix.ok = true;
  return mix;
}

// ---------------------------------------------------------------- engine

GibbsEngine::GibbsEngine(const PanelData& data, const SpatialWeights& w, PriorConfig prior, SamplerConfig config)
    : data_(data), w_(w.blockalized() ? w : bfs_blockalize(w)), prior_(std::move(prior)), config_(std::move(config)) {
  data_.validate();
  if (w_.n() != data_.n_units()) throw DataError("weight matrix size does not match the number of units");
  config_.validate();
  prior_.resolve(data_.n_covariates());
  designs_.reserve(static_cast<std::size_t>(data_.n_units()));
  for (int i = 0; i < data_.n_units(); ++i) designs_.push_back(data_.unit_design(i));
}

Eigen::MatrixXd GibbsEngine::lagged(const Eigen::MatrixXd& q) {
  Eigen::MatrixXd out(q.rows(), q.cols());
  out.col(0).setZero();
  if (q.cols() > 1) out.rightCols(q.cols() - 1) = q.leftCols(q.cols() - 1);
  return out;
}

Eigen::MatrixXd GibbsEngine::factor_target(const SamplerState& s) const {
  const auto& p = s.params;
  const Eigen::MatrixXd& q = s.latent.q;
  const Eigen::MatrixXd ql = lagged(q);
  const SparseRow& w = w_.matrix();
  return q - p.rho.asDiagonal() * (w * q) - p.gamma.asDiagonal() * ql - p.delta.asDiagonal() * (w * ql) -
         data_.linear_predictor(p.b);
}

Eigen::MatrixXd GibbsEngine::structural_residual(const SamplerState& s) const {
  return factor_target(s) - s.params.factor_term();
}

double GibbsEngine::r2_randomization(const SamplerState& s) const {
  const Eigen::MatrixXd e = structural_residual(s);
  const Eigen::MatrixXd& q = s.latent.q;
  const double sst = (q.array() - q.mean()).square().sum();
  if (!(sst > 0.0)) return 0.0;
  return std::clamp(1.0 - e.squaredNorm() / sst, 0.0, 1.0);
}

double GibbsEngine::loglik_pseudo(const SamplerState& s) const {
  const auto& y = data_.y;
  const auto& q = s.latent.q;
  double out = 0.0;
  for (Eigen::Index t = 0; t < y.cols(); ++t)
    for (Eigen::Index i = 0; i < y.rows(); ++i) out += ald_log_pdf(y(i, t) - q(i, t), s.params.tau, s.params.sigma);
  return out;
}

double GibbsEngine::sigma_log_target(const SamplerState& s, double log_sigma) const {
  const double sigma = std::exp(log_sigma);
  const double tau = s.params.tau;
  double loss = 0.0;
  const auto& y = data_.y;
  const auto& q = s.latent.q;
  for (Eigen::Index t = 0; t < y.cols(); ++t)
    for (Eigen::Index i = 0; i < y.rows(); ++i) loss += check_loss(y(i, t) - q(i, t), tau);
  const double nt = static_cast<double>(y.size());
  return gamma_log_pdf(sigma, prior_.v_sigma, prior_.s_sigma) + log_sigma + nt * std::log(tau * (1.0 - tau)) -
         nt * log_sigma - loss / sigma;
}

SamplerState GibbsEngine::make_state(const QuantileParams& params, const LatentState& latent) const {
  SamplerState s;
  s.params = params;
  s.latent = latent;
  s.ald = AldConstants::from_tau(params.tau);
  s.solver.emplace(w_, params.rho);
  s.chain = Rng(config_.seed, {tau_tag(params.tau)});
  s.sigma_q2_base = params.sigma_q2;
  s.rho_rw_step = Eigen::VectorXd::Constant(data_.n_units(), 0.1);
  s.log_sigma_step = 2.4 / std::sqrt(static_cast<double>(data_.y.size()));
  return s;
}

Eigen::VectorXd quantile_regression(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double tau, int max_iter,
                                    double tol) {
  const Eigen::Index k = x.cols();
  const double scale = std::max(1e-12, (y.array() - y.mean()).abs().mean());
  const double eps = 1e-6 * scale;
  const Eigen::VectorXd tilt = (2.0 * tau - 1.0) * x.colwise().sum().transpose();
  Eigen::MatrixXd ridge = 1e-10 * Eigen::MatrixXd::Identity(k, k) * std::max(1.0, x.squaredNorm() / x.rows());
  Eigen::VectorXd beta = (x.transpose() * x + ridge).ldlt().solve(x.transpose() * y);
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd wts = ((y - x * beta).array().abs() + eps).inverse();
    const Eigen::MatrixXd xtw = x.transpose() * wts.asDiagonal();
    const Eigen::VectorXd next = (xtw * x + ridge).ldlt().solve(xtw * y + tilt);
    const double change = (next - beta).norm();
    beta = next;
    if (change <= tol * (1.0 + beta.norm())) break;
  }
  return beta;
}

SamplerState GibbsEngine::initialize(double tau) const {
  const int n = data_.n_units(), t_len = data_.n_periods(), p1 = data_.n_covariates(), r = config_.r_max;
  auto p = QuantileParams::zeros(tau, n, t_len, p1, r);

  for (int i = 0; i < n; ++i) p.b.row(i) = quantile_regression(designs_[i], data_.y.row(i).transpose(), tau).transpose();

  // Rank-r_max principal components of the regression residual.
  if (r > 0) {
    const Eigen::MatrixXd resid = data_.y - data_.linear_predictor(p.b);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(resid, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const int rank = std::min<int>(r, static_cast<int>(svd.singularValues().size()));
    const double st = std::sqrt(static_cast<double>(t_len));
    Eigen::MatrixXd lam = Eigen::MatrixXd::Zero(n, r), f = Eigen::MatrixXd::Zero(t_len, r);
    lam.leftCols(rank) = svd.matrixU().leftCols(rank) * svd.singularValues().head(rank).asDiagonal() / st;
    f.leftCols(rank) = svd.matrixV().leftCols(rank) * st;
    // Rotate so the top block is lower triangular: top = R' Q' from the QR of top'.
    const int top = std::min(n, r);
    const Eigen::MatrixXd top_t = lam.topRows(top).transpose();  // r x top
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(top_t);
    const Eigen::MatrixXd rot = qr.householderQ() * Eigen::MatrixXd::Identity(r, r);
    lam = lam * rot;
    f = f * rot;
    for (int j = 0; j < r; ++j) {
      if (j < top && lam(j, j) < 0.0) {
        lam.col(j) *= -1.0;
        f.col(j) *= -1.0;
      }
      for (int i = 0; i < std::min(j, top); ++i) lam(i, j) = 0.0;
      if (j < top && lam(j, j) < 1e-6) lam(j, j) = 1e-6;
    }
    p.lambda = lam;
    p.f = f;
    for (int j = 0; j < r; ++j) {
      const double den = f.col(j).head(t_len - 1).squaredNorm();
      const double num = f.col(j).tail(t_len - 1).dot(f.col(j).head(t_len - 1));
      p.phi[j] = den > 0.0 ? std::clamp(num / den, -0.95, 0.95) : 0.0;
    }
  }

  // Prior means, shrunk until stationary.
  p.rho.setConstant(prior_.m_rho);
  p.gamma.setConstant(prior_.m_gamma);
  p.delta.setConstant(prior_.m_delta);
  for (int attempt = 0; attempt < 60; ++attempt) {
    bool ok = false;
    try {
      ok = check_stationarity(p.rho, p.delta, p.gamma, w_).stationary;
    } catch (const SingularSystem&) {
    }
    if (ok) break;
    p.rho *= 0.5;
    p.gamma *= 0.5;
    p.delta *= 0.5;
  }

  LatentState latent;
  latent.q = quantile_recursion(p, data_, w_);
  latent.v = Eigen::MatrixXd::Ones(n, t_len);
  p.sigma = config_.sigma_init > 0.0 ? config_.sigma_init : std::max(1e-8, quantile_loss(data_.y, latent.q, tau));
  if (config_.sigma_q2 > 0.0) {
    p.sigma_q2 = config_.sigma_q2;
  } else {
    const double var = (data_.y.array() - data_.y.mean()).square().mean();
    p.sigma_q2 = 1e-3 * std::max(var, 1e-12);
  }
  return make_state(p, latent);
}

// ---------------------------------------------------------------- steps 1-3

void GibbsEngine::draw_gamma(SamplerState& s, Rng& rng) const {
  auto& p = s.params;
  const Eigen::MatrixXd& q = s.latent.q;
  const Eigen::MatrixXd ql = lagged(q);
  const SparseRow& w = w_.matrix();
  const Eigen::MatrixXd ystar = q - p.rho.asDiagonal() * (w * q) - p.delta.asDiagonal() * (w * ql) -
                                data_.linear_predictor(p.b) - p.factor_term();
  const double prec = 1.0 / p.sigma_q2;
  for (int i = 0; i < data_.n_units(); ++i) {
    const double h = prior_.h_gamma + prec * ql.row(i).squaredNorm();
    const double m = (prior_.h_gamma * prior_.m_gamma + prec * ql.row(i).dot(ystar.row(i))) / h;
    p.gamma[i] = m + rng.normal() / std::sqrt(h);
  }
}

void GibbsEngine::draw_delta(SamplerState& s, Rng& rng) const {
  auto& p = s.params;
  const Eigen::MatrixXd& q = s.latent.q;
  const Eigen::MatrixXd ql = lagged(q);
  const SparseRow& w = w_.matrix();
  const Eigen::MatrixXd xstar = w * ql;
  const Eigen::MatrixXd ystar =
      q - p.rho.asDiagonal() * (w * q) - p.gamma.asDiagonal() * ql - data_.linear_predictor(p.b) - p.factor_term();
  const double prec = 1.0 / p.sigma_q2;
  for (int i = 0; i < data_.n_units(); ++i) {
    const double h = prior_.h_delta + prec * xstar.row(i).squaredNorm();
    const double m = (prior_.h_delta * prior_.m_delta + prec * xstar.row(i).dot(ystar.row(i))) / h;
    p.delta[i] = m + rng.normal() / std::sqrt(h);
  }
}

void GibbsEngine::draw_b(SamplerState& s, Rng& rng) const {
  auto& p = s.params;
  const Eigen::MatrixXd& q = s.latent.q;
  const Eigen::MatrixXd ql = lagged(q);
  const SparseRow& w = w_.matrix();
  const Eigen::MatrixXd ystar = q - p.rho.asDiagonal() * (w * q) - p.gamma.asDiagonal() * ql -
                                p.delta.asDiagonal() * (w * ql) - p.factor_term();
  const double prec = 1.0 / p.sigma_q2;
  const Eigen::VectorXd hm = prior_.H_b * prior_.m_b;
  for (int i = 0; i < data_.n_units(); ++i) {
    const Eigen::MatrixXd& x = designs_[i];
    const Eigen::MatrixXd h = prior_.H_b + prec * x.transpose() * x;
    const Eigen::VectorXd c = hm + prec * x.transpose() * ystar.row(i).transpose();
    p.b.row(i) = draw_precision_form(h, c, rng).transpose();
  }
}

// ---------------------------------------------------------------- step 4

RhoConditional GibbsEngine::rho_conditional(const SamplerState& s, int unit) const {
  const auto& p = s.params;
  const Eigen::MatrixXd& q = s.latent.q;
  const SparseRow& w = w_.matrix();
  const int t_len = data_.n_periods();
  // Row i only: y*_it = Q_it - gamma_i Q_i,t-1 - delta_i (WQ)_i,t-1 - x'b - lambda' f ; x*_it = (WQ)_it.
  Eigen::RowVectorXd wq = Eigen::RowVectorXd::Zero(t_len);
  for (SparseRow::InnerIterator it(w, unit); it; ++it) wq += it.value() * q.row(it.col());
  Eigen::RowVectorXd ystar = q.row(unit);
  for (int t = 1; t < t_len; ++t) ystar[t] -= p.gamma[unit] * q(unit, t - 1) + p.delta[unit] * wq[t - 1];
  for (int k = 0; k < data_.n_covariates(); ++k) ystar -= p.b(unit, k) * data_.x[k].row(unit);
  for (int j = 0; j < p.r_max(); ++j)
    if (p.switches[j]) ystar -= p.lambda(unit, j) * p.f.col(j).transpose();
  const double prec = 1.0 / p.sigma_q2;
  RhoConditional k;
  k.h_bar = prior_.h_rho + prec * wq.squaredNorm();
  k.m_bar = (prior_.h_rho * prior_.m_rho + prec * wq.dot(ystar)) / k.h_bar;
  k.rho_cur = p.rho[unit];
  k.t_len = t_len;
  // g = w_i' M^{-1} e_i over the unit's block.
  const auto& wb = s.solver->weights();
  const int b = wb.block_of(unit);
  const auto& members = wb.blocks()[b];
  if (members.size() > 1) {
    const Eigen::VectorXd col = s.solver->inverse_column_local(unit);
    double g = 0.0;
    for (SparseRow::InnerIterator it(w, unit); it; ++it) g += it.value() * col[wb.local_index(static_cast<int>(it.col()))];
    k.g = g;
  }
  return k;
}

int GibbsEngine::draw_rho(SamplerState& s, Rng& rng, bool adapt) const {
  int accepts = 0, fallbacks = 0;
  for (int i = 0; i < data_.n_units(); ++i) {
    const RhoConditional k = rho_conditional(s, i);
    const RhoMixture mix = fit_rho_mixture(k);
    const double cur = s.params.rho[i];
    double prop;
    double log_alpha;
    if (mix.ok) {
      prop = mix.draw(rng);
      log_alpha = k.log_kernel(prop) - k.log_kernel(cur) + mix.log_density(cur) - mix.log_density(prop);
    } else {
      ++fallbacks;
      prop = cur + s.rho_rw_step[i] * rng.normal();
      log_alpha = k.log_kernel(prop) - k.log_kernel(cur);
    }
    bool accept = std::log(rng.uniform()) < log_alpha;
    if (accept) {
      try {
        s.solver->set_rho(i, prop);
        s.params.rho[i] = prop;
      } catch (const SingularSystem&) {
        s.solver->set_rho(i, cur);
        accept = false;
      }
    }
    if (!mix.ok && adapt) s.rho_rw_step[i] *= accept ? 1.1 : 0.95;
    accepts += accept;
  }
  s.last_rho_fallbacks = fallbacks;
  return accepts;
}

// ---------------------------------------------------------------- steps 5-7

void GibbsEngine::draw_factors(SamplerState& s, Rng& rng) const {
  auto& p = s.params;
  const std::vector<int> act = active_columns(p.switches);
  if (act.empty()) return;
  const int ra = static_cast<int>(act.size());
  const Eigen::MatrixXd target = factor_target(s);
  Eigen::MatrixXd lam(data_.n_units(), ra);
  Eigen::VectorXd phi(ra);
  for (int c = 0; c < ra; ++c) {
    lam.col(c) = p.lambda.col(act[c]);
    phi[c] = p.phi[act[c]];
  }
  const FilteredPath path = filter_factors(phi, prior_.h_f, lam, p.sigma_q2, target);
  const Eigen::MatrixXd draw =
      backward_sample(path, Eigen::MatrixXd(phi.asDiagonal()), Eigen::MatrixXd(), Eigen::MatrixXd::Identity(ra, ra), rng);
  for (int c = 0; c < ra; ++c) p.f.col(act[c]) = draw.row(c).transpose();
}

void GibbsEngine::draw_phi(SamplerState& s, Rng& rng) const {
  auto& p = s.params;
  const int t_len = data_.n_periods();
  for (int j = 0; j < p.r_max(); ++j) {
    const auto prev = p.f.col(j).head(t_len - 1);
    const auto next = p.f.col(j).tail(t_len - 1);
    const double h = prev.squaredNorm();
    if (!(h > 0.0)) {
      p.phi[j] = -1.0 + 2.0 * rng.uniform();
      continue;
    }
    p.phi[j] = truncated_normal(rng, next.dot(prev) / h, 1.0 / std::sqrt(h), -1.0, 1.0);
  }
}

void GibbsEngine::draw_loadings(SamplerState& s, Rng& rng) const {
  auto& p = s.params;
  const std::vector<int> act = active_columns(p.switches);
  const int ra = static_cast<int>(act.size());
  const double sd_prior = 1.0 / std::sqrt(prior_.h_lambda);
  for (int j = 0; j < p.r_max(); ++j)
    if (!p.switches[j])
      for (int i = 0; i < data_.n_units(); ++i) p.lambda(i, j) = sd_prior * rng.normal();
  if (ra == 0) return;
  const Eigen::MatrixXd target = factor_target(s);
  Eigen::MatrixXd fa(data_.n_periods(), ra);
  for (int c = 0; c < ra; ++c) fa.col(c) = p.f.col(act[c]);
  const double prec = 1.0 / p.sigma_q2;
  const Eigen::MatrixXd ftf = prec * fa.transpose() * fa;
  const Eigen::MatrixXd fty = prec * fa.transpose() * target.transpose();  // ra x N
  for (int i = 0; i < data_.n_units(); ++i) {
    const int k = i < ra ? i + 1 : ra;
    Eigen::MatrixXd h = ftf.topLeftCorner(k, k);
    h.diagonal().array() += prior_.h_lambda;
    const Eigen::VectorXd c = fty.col(i).head(k);
    Eigen::VectorXd beta(k);
    if (i < ra) {
      // Positive diagonal: marginal of the last coordinate, then the rest given it.
      const Eigen::LLT<Eigen::MatrixXd> llt(h);
      if (llt.info() != Eigen::Success) throw IllConditioned("loading precision is not positive definite");
      const Eigen::VectorXd mean = llt.solve(c);
      const Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(k, k));
      const double last = truncated_normal(rng, mean[k - 1], std::sqrt(cov(k - 1, k - 1)), 0.0, kInf);
      beta[k - 1] = last;
      if (k > 1) {
        const Eigen::MatrixXd hrr = h.topLeftCorner(k - 1, k - 1);
        const Eigen::VectorXd crr = c.head(k - 1) - h.topRightCorner(k - 1, 1) * last;
        beta.head(k - 1) = draw_precision_form(hrr, crr, rng);
      }
    } else {
      beta = draw_precision_form(h, c, rng);
    }
    for (int c2 = 0; c2 < ra; ++c2) p.lambda(i, act[c2]) = c2 < k ? beta[c2] : 0.0;
  }
}

// ---------------------------------------------------------------- steps 8-10

bool GibbsEngine::draw_sigma(SamplerState& s, Rng& rng) const {
  const double cur = std::log(s.params.sigma);
  const double prop = cur + s.log_sigma_step * rng.normal();
  const bool accept = std::log(rng.uniform()) < sigma_log_target(s, prop) - sigma_log_target(s, cur);
  if (accept) s.params.sigma = std::exp(prop);
  return accept;
}

void GibbsEngine::draw_v(SamplerState& s, Rng& rng) const {
  const auto& c = s.ald;
  const double a = c.xi1 * c.xi1 + 2.0 * c.xi2 * c.xi2;
  const double lambda = a / (c.xi2 * c.xi2);
  const double root_a = std::sqrt(a);
  const auto& y = data_.y;
  auto& v = s.latent.v;
  for (Eigen::Index t = 0; t < y.cols(); ++t) {
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double resid = std::max(std::abs(y(i, t) - s.latent.q(i, t)), 1e-12);
      const double x = inverse_gaussian(rng, root_a * s.params.sigma / resid, lambda);
      v(i, t) = std::max(1.0 / x, std::numeric_limits<double>::min());
    }
  }
}

void GibbsEngine::draw_q(SamplerState& s, Rng& rng) const {
  const auto& p = s.params;
  const auto& wb = s.solver->weights();
  const Eigen::MatrixXd drive = data_.linear_predictor(p.b) + p.factor_term();
  const double shift = s.ald.xi1 * p.sigma;
  const double scale2 = s.ald.xi2 * s.ald.xi2 * p.sigma * p.sigma;
  const int t_len = data_.n_periods();
  for (int b = 0; b < wb.n_blocks(); ++b) {
    const auto& members = wb.blocks()[b];
    const int m = static_cast<int>(members.size());
    Eigen::MatrixXd g = wb.block_matrix(b);
    for (int k = 0; k < m; ++k) {
      g.row(k) *= p.delta[members[k]];
      g(k, k) += p.gamma[members[k]];
    }
    Eigen::MatrixXd mt(m, t_len), z(m, t_len), r(m, t_len);
    for (int k = 0; k < m; ++k) {
      const int u = members[k];
      mt.row(k) = drive.row(u);
      z.row(k) = data_.y.row(u) - shift * s.latent.v.row(u);
      r.row(k) = scale2 * s.latent.v.row(u);
    }
    const Eigen::MatrixXd trans = s.solver->solve_block(b, g);
    const Eigen::MatrixXd offsets = s.solver->solve_block(b, mt);
    const Eigen::MatrixXd minv = s.solver->solve_block(b, Eigen::MatrixXd::Identity(m, m));
    const Eigen::MatrixXd qn = p.sigma_q2 * minv * minv.transpose();
    const FilteredPath path = filter_identity_obs(trans, offsets, qn, z, r);
    Rng brng = rng.substream(static_cast<std::uint64_t>(b));
    const Eigen::MatrixXd draw = backward_sample(path, trans, offsets, qn, brng);
    for (int k = 0; k < m; ++k) s.latent.q.row(members[k]) = draw.row(k);
  }
}

// ---------------------------------------------------------------- sweep

SweepDiagnostics GibbsEngine::sweep(SamplerState& s, bool adapt) const {
  const auto& tg = config_.toggles;
  const auto sweep_id = static_cast<std::uint64_t>(s.sweep);
  if (config_.decay != 1.0) s.params.sigma_q2 = s.sigma_q2_base * std::pow(config_.decay, static_cast<double>(s.sweep));
  auto stream = [&](std::uint64_t step) { return s.chain.substream({sweep_id, step}); };
  auto run = [&](int step, auto&& fn) {
    try {
      fn();
    } catch (const SweepError&) {
      throw;
    } catch (const std::exception& e) {
      throw SweepError(step > 10 ? static_cast<int>(kFactors) : step, step_name(step), e.what());
    }
  };

  SweepDiagnostics d;
  d.sweep = s.sweep;
  if (tg.gamma) run(kGamma, [&] { Rng r = stream(kGamma); draw_gamma(s, r); });
  if (tg.delta) run(kDelta, [&] { Rng r = stream(kDelta); draw_delta(s, r); });
  if (tg.b) run(kB, [&] { Rng r = stream(kB); draw_b(s, r); });
  if (tg.rho) {
    run(kRho, [&] {
      Rng r = stream(kRho);
      const int acc = draw_rho(s, r, adapt);
      d.accept_rate_rho = static_cast<double>(acc) / data_.n_units();
      d.rho_fallbacks = s.last_rho_fallbacks;
    });
  }
  if (config_.factor_select && tg.switches && s.params.r_max() > 0) {
    run(kSwitches, [&] {
      Rng r = stream(kSwitches);
      for (int k = 0; k < s.params.r_max(); ++k) draw_switch(*this, s, k, r);
    });
  }
  if (tg.factors) {
    run(kFactors, [&] {
      Rng r = stream(kFactors);
      draw_factors(s, r);
      if (config_.factor_select) {
        Rng ri = r.substream(1);
        draw_inactive_factors(*this, s, ri);
      }
    });
  }
  if (tg.phi) run(kPhi, [&] { Rng r = stream(kPhi); draw_phi(s, r); });
  if (tg.loadings) run(kLoadings, [&] { Rng r = stream(kLoadings); draw_loadings(s, r); });
  if (tg.sigma) {
    run(kSigma, [&] {
      Rng r = stream(kSigma);
      const bool acc = draw_sigma(s, r);
      d.accept_rate_sigma = acc ? 1.0 : 0.0;
      if (adapt) {
        s.sigma_window_accepts += acc;
        if (++s.sigma_window_trials == 20) {
          const double rate = s.sigma_window_accepts / 20.0;
          if (rate < 0.30) s.log_sigma_step *= 0.8;
          if (rate > 0.45) s.log_sigma_step *= 1.25;
          s.sigma_window_accepts = s.sigma_window_trials = 0;
        }
      }
    });
  }
  if (tg.v) run(kV, [&] { Rng r = stream(kV); draw_v(s, r); });
  if (tg.q) run(kQ, [&] { Rng r = stream(kQ); draw_q(s, r); });

  d.r2_randomization = r2_randomization(s);
  d.loglik_pseudo = loglik_pseudo(s);
  d.sigma = s.params.sigma;
  d.sigma_q2 = s.params.sigma_q2;
  d.active_factors = s.params.active_factors();
  ++s.sweep;
  return d;
}

double GibbsEngine::tune_sigma_q2(SamplerState& s) const {
  const double var = std::max((data_.y.array() - data_.y.mean()).square().mean(), 1e-12);
  double lo = std::log(1e-8 * var), hi = std::log(10.0 * var);
  auto mean_r2 = [&](double log_q2) {
    SamplerState trial = s;
    trial.params.sigma_q2 = std::exp(log_q2);
    trial.sigma_q2_base = trial.params.sigma_q2;
    trial.chain = s.chain.substream({0x7e57, static_cast<std::uint64_t>(std::llround(log_q2 * 1e6) + (1ll << 40))});
    double acc = 0.0;
    int used = 0;
    for (int k = 0; k < config_.tune_sweeps; ++k) {
      const auto d = sweep(trial, true);
      if (k >= config_.tune_sweeps / 2) {
        acc += d.r2_randomization;
        ++used;
      }
    }
    return acc / used;
  };
  // R^2 falls as sigma_q2 grows; bisect on the log scale.
  for (int it = 0; it < config_.tune_iterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mean_r2(mid) >= config_.target_r2) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double chosen = std::exp(lo);
  s.params.sigma_q2 = chosen;
  s.sigma_q2_base = chosen;
  return chosen;
}

}  // namespace dsqp
