#include "dsqp/dgp.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "dsqp/distributions.hpp"
#include "dsqp/errors.hpp"
#include "dsqp/rng.hpp"

namespace dsqp {

namespace {

double law_at(double level, double slope, double u) { return level + slope * (u - 0.5); }

Eigen::VectorXd draw_levels(Rng& rng, const CoefficientLaw& law, int n) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = law.lo + (law.hi - law.lo) * rng.uniform();
  return v;
}

void check_law(const CoefficientLaw& law, const char* name) {
  if (!(law.lo <= law.hi) || !std::isfinite(law.lo) || !std::isfinite(law.hi) || !std::isfinite(law.slope))
    throw ConfigError(std::string("invalid coefficient law for ") + name);
}

bool stationary_at(const Eigen::VectorXd& rho, const Eigen::VectorXd& delta, const Eigen::VectorXd& gamma,
                   const SpatialWeights& w) {
  try {
    return check_stationarity(rho, delta, gamma, w).stationary;
  } catch (const SingularSystem&) {
    return false;
  }
}

void read_law(const nlohmann::json& j, const char* key, CoefficientLaw& law) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  law.lo = v.value("lo", law.lo);
  law.hi = v.value("hi", law.hi);
  law.slope = v.value("slope", law.slope);
}

nlohmann::json law_json(const CoefficientLaw& l) { return {{"lo", l.lo}, {"hi", l.hi}, {"slope", l.slope}}; }

Eigen::VectorXd vec_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::MatrixXd mat_from_json(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  const Eigen::Index cols = rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != cols) throw DataError("ragged matrix in JSON");
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<std::size_t>(c)];
  }
  return m;
}

nlohmann::json to_json_vec(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

nlohmann::json to_json_mat(const Eigen::MatrixXd& m) {
  auto out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(i, c);
    out.push_back(row);
  }
  return out;
}

}  // namespace

DgpConfig dgp_config_from_json(const nlohmann::json& j) {
  DgpConfig c;
  c.n_units = j.value("n_units", c.n_units);
  c.n_periods = j.value("n_periods", c.n_periods);
  c.n_covariates = j.value("n_covariates", c.n_covariates);
  c.n_factors = j.value("n_factors", c.n_factors);
  c.seed = j.value("seed", c.seed);
  c.burn_in = j.value("burn_in", c.burn_in);
  c.max_redraws = j.value("max_redraws", c.max_redraws);
  read_law(j, "rho", c.rho);
  read_law(j, "gamma", c.gamma);
  read_law(j, "delta", c.delta);
  read_law(j, "slope", c.slope);
  read_law(j, "intercept", c.intercept);
  read_law(j, "phi", c.phi);
  c.error_scale = j.value("error_scale", c.error_scale);
  c.loading_mean = j.value("loading_mean", c.loading_mean);
  c.loading_sd = j.value("loading_sd", c.loading_sd);
  return c;
}

nlohmann::json to_json(const DgpConfig& c) {
  return {{"n_units", c.n_units},         {"n_periods", c.n_periods},
          {"n_covariates", c.n_covariates}, {"n_factors", c.n_factors},
          {"seed", c.seed},               {"burn_in", c.burn_in},
          {"max_redraws", c.max_redraws}, {"rho", law_json(c.rho)},
          {"gamma", law_json(c.gamma)},   {"delta", law_json(c.delta)},
          {"slope", law_json(c.slope)},   {"intercept", law_json(c.intercept)},
          {"phi", law_json(c.phi)},       {"error_scale", c.error_scale},
          {"loading_mean", c.loading_mean}, {"loading_sd", c.loading_sd}};
}

QuantileParams TrueParams::at(double tau) const {
  const int n = static_cast<int>(rho_level.size());
  auto p = QuantileParams::zeros(tau, n, static_cast<int>(f.rows()), static_cast<int>(b_level.cols()),
                                 static_cast<int>(phi.size()));
  for (int i = 0; i < n; ++i) {
    p.rho[i] = law_at(rho_level[i], rho_slope, tau);
    p.gamma[i] = law_at(gamma_level[i], gamma_slope, tau);
    p.delta[i] = law_at(delta_level[i], delta_slope, tau);
    for (Eigen::Index k = 0; k < b_level.cols(); ++k) p.b(i, k) = law_at(b_level(i, k), b_slope[k], tau);
    p.b(i, 0) += error_scale * normal_quantile(tau);
  }
  p.lambda = lambda;
  p.f = f;
  p.phi = phi;
  return p;
}

nlohmann::json TrueParams::to_json() const {
  return {{"rho_level", to_json_vec(rho_level)},
          {"gamma_level", to_json_vec(gamma_level)},
          {"delta_level", to_json_vec(delta_level)},
          {"rho_slope", rho_slope},
          {"gamma_slope", gamma_slope},
          {"delta_slope", delta_slope},
          {"b_level", to_json_mat(b_level)},
          {"b_slope", to_json_vec(b_slope)},
          {"error_scale", error_scale},
          {"lambda", to_json_mat(lambda)},
          {"f", to_json_mat(f)},
          {"phi", to_json_vec(phi)}};
}

TrueParams TrueParams::from_json(const nlohmann::json& j) {
  try {
    TrueParams t;
    t.rho_level = vec_from_json(j.at("rho_level"));
    t.gamma_level = vec_from_json(j.at("gamma_level"));
    t.delta_level = vec_from_json(j.at("delta_level"));
    t.rho_slope = j.at("rho_slope").get<double>();
    t.gamma_slope = j.at("gamma_slope").get<double>();
    t.delta_slope = j.at("delta_slope").get<double>();
    t.b_level = mat_from_json(j.at("b_level"));
    t.b_slope = vec_from_json(j.at("b_slope"));
    t.error_scale = j.at("error_scale").get<double>();
    t.lambda = mat_from_json(j.at("lambda"));
    t.f = mat_from_json(j.at("f"));
    t.phi = vec_from_json(j.at("phi"));
    const auto n = t.rho_level.size();
    if (t.gamma_level.size() != n || t.delta_level.size() != n || t.b_level.rows() != n ||
        t.b_slope.size() != t.b_level.cols() || (t.phi.size() > 0 && t.lambda.rows() != n) ||
        t.lambda.cols() != t.phi.size() || t.f.cols() != t.phi.size())
      throw DataError("true-parameter JSON has inconsistent shapes");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed true-parameter JSON: ") + e.what());
  }
}

SimulatedPanel simulate_dgp(const DgpConfig& c, const SpatialWeights& w) {
  if (c.n_units < 1 || c.n_periods < 2 || c.n_covariates < 0 || c.n_factors < 0 || c.burn_in < 0 ||
      c.max_redraws < 1)
    throw ConfigError("simulate: need N >= 1, T >= 2 and non-negative p, r, burn-in");
  if (w.n() != c.n_units) throw ConfigError("simulate: weight matrix size does not match N");
  for (auto [law, name] : {std::pair{&c.rho, "rho"}, {&c.gamma, "gamma"}, {&c.delta, "delta"},
                           {&c.slope, "slope"}, {&c.intercept, "intercept"}, {&c.phi, "phi"}})
    check_law(*law, name);
  if (!(c.phi.lo > -1.0 && c.phi.hi < 1.0)) throw ConfigError("simulate: factor AR coefficients must lie in (-1, 1)");

  const int n = c.n_units, p1 = c.n_covariates + 1, r = c.n_factors;
  const int total = c.n_periods + c.burn_in;
  const Rng root(c.seed, {0xd69});
  const SpatialWeights wb = w.blockalized() ? w : bfs_blockalize(w);

  TrueParams truth;
  truth.rho_slope = c.rho.slope;
  truth.gamma_slope = c.gamma.slope;
  truth.delta_slope = c.delta.slope;
  truth.error_scale = c.error_scale;
  truth.b_slope = Eigen::VectorXd::Constant(p1, c.slope.slope);
  truth.b_slope[0] = c.intercept.slope;

  // Unit-level coefficient draws, redrawn until A(u) is stationary at the extremes and centre of the u range.
  bool ok = false;
  for (int attempt = 0; attempt < c.max_redraws && !ok; ++attempt) {
    Rng rng = root.substream({1, static_cast<std::uint64_t>(attempt)});
    truth.rho_level = draw_levels(rng, c.rho, n);
    truth.gamma_level = draw_levels(rng, c.gamma, n);
    truth.delta_level = draw_levels(rng, c.delta, n);
    ok = true;
    for (double u : {0.5, 0.001, 0.999}) {
      const Eigen::VectorXd ru = truth.rho_level.array() + c.rho.slope * (u - 0.5);
      const Eigen::VectorXd gu = truth.gamma_level.array() + c.gamma.slope * (u - 0.5);
      const Eigen::VectorXd du = truth.delta_level.array() + c.delta.slope * (u - 0.5);
      if (!stationary_at(ru, du, gu, wb)) {
        ok = false;
        break;
      }
    }
  }
  if (!ok) throw NonstationaryDraw("no stationary coefficient draw after " + std::to_string(c.max_redraws) + " attempts");

  Rng rng_b = root.substream(2);
  truth.b_level.resize(n, p1);
  truth.b_level.col(0) = draw_levels(rng_b, c.intercept, n);
  for (int k = 1; k < p1; ++k) truth.b_level.col(k) = draw_levels(rng_b, c.slope, n);

  Rng rng_f = root.substream(3);
  truth.phi = draw_levels(rng_f, c.phi, r);
  truth.lambda.resize(n, r);
  for (int k = 0; k < truth.lambda.size(); ++k) truth.lambda.data()[k] = c.loading_mean + c.loading_sd * rng_f.normal();
  Eigen::MatrixXd f_all(total, r);
  for (int j = 0; j < r; ++j) {
    double prev = rng_f.normal() / std::sqrt(1.0 - truth.phi[j] * truth.phi[j]);
    for (int t = 0; t < total; ++t) {
      prev = truth.phi[j] * prev + rng_f.normal();
      f_all(t, j) = prev;
    }
  }

  Rng rng_x = root.substream(4);
  std::vector<Eigen::MatrixXd> x_all(static_cast<std::size_t>(p1), Eigen::MatrixXd::Ones(n, total));
  for (int k = 1; k < p1; ++k)
    for (int t = 0; t < total; ++t)
      for (int i = 0; i < n; ++i) x_all[k](i, t) = rng_x.normal();

  const bool spatial_varies = c.rho.slope != 0.0 || c.gamma.slope != 0.0 || c.delta.slope != 0.0;
  const SparseRow& wm = wb.matrix();
  Rng rng_u = root.substream(5);
  Eigen::MatrixXd y_all(n, total), u_all(n, total);
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(n);
  SpatialSolver solver(wb, truth.rho_level);
  for (int t = 0; t < total; ++t) {
    Eigen::VectorXd u(n), ru(n), gu(n), du(n);
    bool drawn = false;
    for (int attempt = 0; attempt < c.max_redraws && !drawn; ++attempt) {
      for (int i = 0; i < n; ++i) u[i] = rng_u.uniform();
      ru = truth.rho_level.array() + c.rho.slope * (u.array() - 0.5);
      gu = truth.gamma_level.array() + c.gamma.slope * (u.array() - 0.5);
      du = truth.delta_level.array() + c.delta.slope * (u.array() - 0.5);
      drawn = !spatial_varies || stationary_at(ru, du, gu, wb);
    }
    if (!drawn) throw NonstationaryDraw("period " + std::to_string(t) + ": no stationary u draw within the redraw cap");
    u_all.col(t) = u;
    Eigen::VectorXd rhs = f_all.cols() > 0 ? Eigen::VectorXd(truth.lambda * f_all.row(t).transpose())
                                           : Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) {
      double xb = c.error_scale * normal_quantile(u[i]);
      for (int k = 0; k < p1; ++k) xb += x_all[k](i, t) * law_at(truth.b_level(i, k), truth.b_slope[k], u[i]);
      rhs[i] += xb;
    }
    if (t > 0) rhs += gu.cwiseProduct(prev) + du.cwiseProduct(wm * prev);
    if (spatial_varies) solver.update(ru);
    prev = solver.solve(rhs);
    y_all.col(t) = prev;
  }

  // The right-hand side must be nondecreasing in u_it for y_it to be its u_it-quantile.
  if (spatial_varies || truth.b_slope.cwiseAbs().maxCoeff() > 0.0) {
    const Eigen::MatrixXd wy = wm * y_all;
    for (int t = 0; t < total; ++t) {
      for (int i = 0; i < n; ++i) {
        double last = -INFINITY;
        for (int g = 1; g <= 99; ++g) {
          const double u = g / 100.0;
          double v = law_at(truth.rho_level[i], c.rho.slope, u) * wy(i, t) + c.error_scale * normal_quantile(u);
          if (t > 0)
            v += law_at(truth.gamma_level[i], c.gamma.slope, u) * y_all(i, t - 1) +
                 law_at(truth.delta_level[i], c.delta.slope, u) * wy(i, t - 1);
          for (int k = 0; k < p1; ++k) v += x_all[k](i, t) * law_at(truth.b_level(i, k), truth.b_slope[k], u);
          if (v < last - 1e-12)
            throw ConfigError("coefficient laws are not monotone in u for unit " + std::to_string(i) + " at period " +
                              std::to_string(t - c.burn_in));
          last = v;
        }
      }
    }
  }

  SimulatedPanel out;
  out.data.y = y_all.rightCols(c.n_periods);
  for (int k = 0; k < p1; ++k) out.data.x.push_back(x_all[k].rightCols(c.n_periods));
  out.data.has_intercept = true;
  for (int i = 0; i < n; ++i) out.data.unit_ids.push_back(std::to_string(i));
  for (int t = 0; t < c.n_periods; ++t) out.data.time_ids.push_back(std::to_string(t));
  out.data.covariate_names.push_back("const");
  for (int k = 1; k < p1; ++k) out.data.covariate_names.push_back("x" + std::to_string(k));
  truth.f = f_all.bottomRows(c.n_periods);
  out.truth = std::move(truth);
  return out;
}

SpatialWeights clustered_weights(int n, int min_size, int max_size, int neighbors, std::uint64_t seed) {
  if (n < 1 || min_size < 1 || max_size < min_size || neighbors < 0)
    throw ConfigError("clustered weights: need n >= 1 and 1 <= min_size <= max_size");
  Rng rng(seed, {0xc1u});
  std::set<std::pair<int, int>> edges;
  int start = 0;
  while (start < n) {
    int size = min_size + static_cast<int>(rng() % static_cast<std::uint64_t>(max_size - min_size + 1));
    size = std::min(size, n - start);
    const int k = std::min(neighbors, size - 1);
    for (int a = 0; a < size; ++a) {
      std::set<int> picked;
      while (static_cast<int>(picked.size()) < k) {
        const int b = static_cast<int>(rng() % static_cast<std::uint64_t>(size));
        if (b != a) picked.insert(b);
      }
      for (int b : picked) {
        edges.insert({start + a, start + b});
        edges.insert({start + b, start + a});
      }
    }
    start += size;
  }
  std::vector<WeightTriplet> trips;
  trips.reserve(edges.size());
  for (auto [i, j] : edges) trips.push_back({i, j, 1.0});
  return bfs_blockalize(normalize_rows(SpatialWeights(n, trips)));
}

}  // namespace dsqp
