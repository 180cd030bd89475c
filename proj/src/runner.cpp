#include "dsqp/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <toml.hpp>

#include "dsqp/errors.hpp"

namespace dsqp {

namespace {

nlohmann::json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (const auto* a = node.as_array()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  throw ConfigError("unsupported TOML value type (dates and times are not accepted)");
}

nlohmann::json schema_json(const PanelSchema& s) {
  return {{"unit", s.unit},       {"time", s.time},           {"y", s.y},
          {"numeric", s.numeric}, {"categorical", s.categorical}, {"intercept", s.intercept}};
}

PanelSchema schema_from(const nlohmann::json& j) {
  PanelSchema s;
  s.unit = j.value("unit", s.unit);
  s.time = j.value("time", s.time);
  s.y = j.value("y", s.y);
  s.numeric = j.value("numeric", s.numeric);
  s.categorical = j.value("categorical", s.categorical);
  s.intercept = j.value("intercept", s.intercept);
  return s;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

}  // namespace

void RunConfig::validate() const {
  if (taus.empty()) throw ConfigError("at least one tau is required");
  for (double t : taus)
    if (!(t > 0.0 && t < 1.0)) throw ConfigError(fmt::format("tau {} is outside (0, 1)", t));
  auto sorted = taus;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("duplicate tau values");
  if (data.empty()) throw ConfigError("no data path configured");
  if (progress_every < 0) throw ConfigError("progress_every must be non-negative");
  sampler.validate();
}

nlohmann::json RunConfig::to_json() const {
  return {{"data", data.string()},
          {"weights", weights.string()},
          {"schema", schema_json(schema)},
          {"taus", taus},
          {"sampler", sampler.to_json()},
          {"prior", prior.to_json()},
          {"output", output.string()},
          {"enable_is", enable_is},
          {"progress_every", progress_every}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  try {
    static const std::vector<std::string> known = {"data",  "weights",   "schema",        "taus",  "sampler",
                                                   "prior", "output",    "enable_is",     "seed",  "progress_every"};
    for (const auto& [k, v] : j.items())
      if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
    RunConfig c;
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.empty() || path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    };
    c.data = resolve(j.value("data", std::string()));
    c.weights = resolve(j.value("weights", std::string()));
    c.output = resolve(j.value("output", std::string("dsqp_out")));
    if (j.contains("schema")) c.schema = schema_from(j.at("schema"));
    c.taus = j.value("taus", c.taus);
    if (j.contains("sampler")) c.sampler = SamplerConfig::from_json(j.at("sampler"));
    if (j.contains("seed")) c.sampler.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("prior")) c.prior = PriorConfig::from_json(j.at("prior"));
    c.enable_is = j.value("enable_is", c.enable_is);
    c.progress_every = j.value("progress_every", c.progress_every);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad configuration value: ") + e.what());
  }
}

nlohmann::json load_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  if (path.extension() == ".json") {
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid JSON config: ") + e.what());
    }
  }
  try {
    const toml::table tbl = toml::parse(in, path.string());
    return toml_to_json(tbl);
  } catch (const toml::parse_error& e) {
    throw ConfigError(fmt::format("invalid TOML config: {}", e.description()));
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return RunConfig::from_json(load_config_document(path), path.parent_path());
}

std::string tau_dirname(double tau) { return "tau_" + format_double(tau); }

QuantileRun run_quantile(const GibbsEngine& engine, double tau, bool enable_is, int progress_every,
                         const nlohmann::json& config_echo) {
  const auto& cfg = engine.config();
  SamplerState s = engine.initialize(tau);
  QuantileRun out;
  out.record.tau = tau;
  out.record.config = config_echo;
  out.record.n_burnin = cfg.n_burnin;
  out.record.unit_ids = engine.data().unit_ids;
  const auto& p0 = s.params;
  out.record.init_stationarity = check_stationarity(p0.rho, p0.delta, p0.gamma, engine.weights());
  if (!out.record.init_stationarity.stationary)
    spdlog::warn("tau {}: initial coefficients are not stationary (spectral radius {:.4f})", tau,
                 out.record.init_stationarity.spectral_radius);
  if (cfg.sigma_q2_mode == SigmaQ2Mode::TargetR2) {
    const double q2 = engine.tune_sigma_q2(s);
    spdlog::info("tau {}: sigma_q2 tuned to {:.4g} for target R^2 {}", tau, q2, cfg.target_r2);
  }
  out.record.sigma_q2 = s.params.sigma_q2;

  const ParamLayout layout = ParamLayout::of(s.params);
  out.accumulator = PosteriorAccumulator(layout);
  out.draws = DrawFile(layout, tau, s.params.sigma_q2);
  const long total = static_cast<long>(cfg.n_burnin) + cfg.n_sweeps;
  out.record.trace.reserve(static_cast<std::size_t>(total));
  auto start = std::chrono::steady_clock::now();
  for (long k = 0; k < total; ++k) {
    const bool burn = k < cfg.n_burnin;
    const SweepDiagnostics d = engine.sweep(s, burn);
    out.record.trace.push_back(d);
    if (!burn && (k - cfg.n_burnin) % cfg.thinning == 0) {
      out.accumulator.accumulate(s.params);
      if (enable_is) out.draws.add({d.sweep, d.loglik_pseudo, layout.pack(s.params)});
    }
    if (progress_every > 0 && (k + 1) % progress_every == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      spdlog::info("tau {}: sweep {}/{} ({:.1f} sweeps/s) R2 {:.3f} loglik {:.2f} factors {}", tau, k + 1, total,
                   (k + 1) / std::max(secs, 1e-9), d.r2_randomization, d.loglik_pseudo, d.active_factors);
    }
  }
  if (out.accumulator.count() == 0) throw RunTooShort(fmt::format("tau {}: no retained sweeps", tau));

  const Eigen::VectorXd rho = out.accumulator.block_mean("rho");
  const Eigen::VectorXd delta = out.accumulator.block_mean("delta");
  const Eigen::VectorXd gamma = out.accumulator.block_mean("gamma");
  try {
    out.record.mean_stationarity = check_stationarity(rho, delta, gamma, engine.weights());
    const SpatialSolver solver(engine.weights(), rho);
    out.record.inverse_norm1 = solver.inverse_norm1_estimate();
    out.record.inverse_norm_inf = solver.inverse_norm_inf_estimate();
  } catch (const SingularSystem& e) {
    spdlog::warn("tau {}: posterior-mean spatial system is singular: {}", tau, e.what());
    out.record.mean_stationarity.stationary = false;
  }

  if (enable_is) {
    out.record.is = importance_reweight(out.draws, engine.data(), engine.weights(), engine.prior(), 1);
    out.record.has_is = true;
  }
  out.final_state = std::move(s);
  return out;
}

void write_quantile_outputs(const QuantileRun& run, const std::filesystem::path& dir) {
  run_report(run.accumulator, run.record, dir);
  write_json(dir / "accumulator.json", run.accumulator.to_json());
  write_json(dir / "run.json", run.record.to_json());
  if (run.record.has_is) run.draws.save(dir / "draws.bin");
}

int worker_threads() {
  if (const char* env = std::getenv("DSQP_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->kind()) {
      case ErrorKind::Config: return 2;
      case ErrorKind::Numerical: return 3;
      case ErrorKind::Data: return 4;
    }
  }
  return 3;
}

int run_all(const RunConfig& config) {
  config.validate();
  const PanelData data = ingest_panel(config.data, config.schema);
  SpatialWeights w = config.weights.empty() ? SpatialWeights::empty(data.n_units()) : read_weights(config.weights);
  if (w.n() != data.n_units())
    throw DataError(fmt::format("weight matrix has {} units, panel has {}", w.n(), data.n_units()));
  if (!w.row_normalized() && w.nnz() > 0)
    spdlog::warn("weight matrix is not flagged as row-normalized; max row-sum deviation {:.3g}",
                 w.max_row_sum_deviation());
  const GibbsEngine engine(data, w, config.prior, config.sampler);
  spdlog::info("panel N={} T={} p+1={}, {} spatial block(s), tau levels {}", data.n_units(), data.n_periods(),
               data.n_covariates(), engine.weights().n_blocks(), config.taus.size());
  std::filesystem::create_directories(config.output);
  const nlohmann::json echo = config.to_json();

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  int status = 0;
  auto worker = [&] {
    for (std::size_t k = next++; k < config.taus.size(); k = next++) {
      const double tau = config.taus[k];
      const auto dir = config.output / tau_dirname(tau);
      std::filesystem::create_directories(dir);
      std::filesystem::remove(dir / "error.json");
      try {
        const QuantileRun run = run_quantile(engine, tau, config.enable_is, config.progress_every, echo);
        write_quantile_outputs(run, dir);
        spdlog::info("tau {}: wrote {}", tau, dir.string());
      } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        spdlog::error("tau {}: {}", tau, e.what());
        write_json(dir / "error.json", {{"tau", tau}, {"error", e.what()}, {"exit_code", code}, {"partial", true}});
        std::lock_guard lock(mu);
        if (status == 0) status = code;
      }
    }
  };
  const int n_workers = std::min<int>(worker_threads(), static_cast<int>(config.taus.size()));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return status;
}

}  // namespace dsqp
