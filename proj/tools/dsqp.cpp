#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "dsqp/dgp.hpp"
#include "dsqp/errors.hpp"
#include "dsqp/io.hpp"
#include "dsqp/posterior.hpp"
#include "dsqp/runner.hpp"

namespace fs = std::filesystem;
using namespace dsqp;

namespace {

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(1) << '\n';
}

struct SimulateArgs {
  int n = 50, t = 200, r = 1, p = 1;
  std::uint64_t seed = 1;
  std::string out = ".";
  std::string dgp;
  int block_min = 5, block_max = 20, neighbors = 2;
};

int cmd_simulate(const SimulateArgs& a) {
  DgpConfig c = a.dgp.empty() ? DgpConfig{} : dgp_config_from_json(read_json(a.dgp));
  c.n_units = a.n;
  c.n_periods = a.t;
  c.n_factors = a.r;
  c.n_covariates = a.p;
  c.seed = a.seed;
  if (a.block_min < 1 || a.block_max < a.block_min) throw ConfigError("need 1 <= --block-min <= --block-max");
  const SpatialWeights w = clustered_weights(a.n, std::min(a.block_min, a.n), std::min(a.block_max, a.n),
                                             a.neighbors, a.seed);
  const SimulatedPanel sim = simulate_dgp(c, w);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_panel_csv(sim.data, out / "panel.csv");
  write_weights(w, out / "weights.csv");
  write_json(out / "truth.json", {{"dgp", to_json(c)}, {"truth", sim.truth.to_json()}});
  std::cout << fmt::format("wrote {} units x {} periods ({} covariates, {} factors, {} spatial blocks) to {}\n", a.n,
                           a.t, a.p, a.r, w.n_blocks(), out.string());
  return 0;
}

struct RunArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<double> taus;
  std::optional<int> sweeps, burnin, r_max;
  bool enable_is = false;
};

int cmd_run(const RunArgs& a) {
  const fs::path path = fs::absolute(a.config);
  nlohmann::json doc = load_config_document(path);
  if (a.seed) doc["seed"] = *a.seed;
  if (a.out) doc["output"] = fs::absolute(*a.out).string();
  if (!a.taus.empty()) doc["taus"] = a.taus;
  if (a.sweeps) doc["sampler"]["n_sweeps"] = *a.sweeps;
  if (a.burnin) doc["sampler"]["n_burnin"] = *a.burnin;
  if (a.r_max) doc["sampler"]["r_max"] = *a.r_max;
  if (a.enable_is) doc["enable_is"] = true;
  const RunConfig cfg = RunConfig::from_json(doc, path.parent_path());
  const int status = run_all(cfg);
  if (status != 0) spdlog::error("one or more quantile levels failed; see error.json in their directories");
  return status;
}

struct CheckArgs {
  std::string file;
  bool normalize = false;
  std::string out;
};

int cmd_check_w(const CheckArgs& a) {
  SpatialWeights w = read_weights(fs::path(a.file));
  if (a.normalize) w = normalize_rows(w);
  w = bfs_blockalize(w);
  std::size_t largest = 0, singletons = 0;
  for (const auto& b : w.blocks()) {
    largest = std::max(largest, b.size());
    singletons += b.size() == 1;
  }
  const double dev = w.max_row_sum_deviation();
  const bool ok = dev <= 1e-12;
  std::cout << fmt::format("units: {}\nnonzeros: {}\nblocks: {}\nlargest block: {}\nisolated units: {}\n", w.n(),
                           w.nnz(), w.n_blocks(), largest, singletons);
  std::cout << fmt::format("max |row sum - 1|: {:.3g} ({})\n", dev, ok ? "row-normalized" : "not row-normalized");
  if (!a.out.empty()) {
    write_weights(w, fs::path(a.out));
    std::cout << "wrote " << a.out << '\n';
  }
  return 0;
}

struct PostArgs {
  std::string dir;
  std::string out;
  int threads = 0;
};

// The echoed configuration inside run.json carries the data, weights and prior.
RunConfig echoed_config(const RunRecord& rec) {
  if (rec.config.is_null() || rec.config.empty()) throw ConfigError("run.json carries no configuration echo");
  return RunConfig::from_json(rec.config);
}

int cmd_reweight(const PostArgs& a) {
  const fs::path dir(a.dir);
  const auto acc = PosteriorAccumulator::from_json(read_json(dir / "accumulator.json"));
  auto rec = RunRecord::from_json(read_json(dir / "run.json"));
  const DrawFile draws = DrawFile::load(dir / "draws.bin");
  const RunConfig cfg = echoed_config(rec);
  const PanelData data = ingest_panel(cfg.data, cfg.schema);
  const SpatialWeights w = cfg.weights.empty() ? SpatialWeights::empty(data.n_units()) : read_weights(cfg.weights);
  PriorConfig prior = cfg.prior;
  prior.resolve(data.n_covariates());
  const int threads = a.threads > 0 ? a.threads : worker_threads();
  rec.is = importance_reweight(draws, data, w, prior, threads);
  rec.has_is = true;
  const fs::path out = a.out.empty() ? dir : fs::path(a.out);
  fs::create_directories(out);
  run_report(acc, rec, out);
  write_json(out / "run.json", rec.to_json());
  std::cout << fmt::format("{} draws, ESS {:.1f} ({:.3f} of draws){}\n", draws.draws().size(), rec.is.weights.ess,
                           rec.is.ess_ratio(), rec.is.degenerate ? ", weights are degenerate" : "");
  return 0;
}

int cmd_report(const PostArgs& a) {
  const fs::path dir(a.dir);
  const auto acc = PosteriorAccumulator::from_json(read_json(dir / "accumulator.json"));
  const auto rec = RunRecord::from_json(read_json(dir / "run.json"));
  const fs::path out = a.out.empty() ? dir : fs::path(a.out);
  fs::create_directories(out);
  run_report(acc, rec, out);
  std::cout << "wrote report for tau " << format_double(rec.tau) << " to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("dsqp"));
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");

  CLI::App app{"Dynamic spatial panel quantile models with interactive effects"};
  app.require_subcommand(1);
  bool quiet = false, verbose = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Simulate a panel, a clustered weight matrix and the true parameters");
  s->add_option("--n", sim.n, "Units")->check(CLI::PositiveNumber);
  s->add_option("--t", sim.t, "Periods")->check(CLI::PositiveNumber);
  s->add_option("--r", sim.r, "Factors")->check(CLI::NonNegativeNumber);
  s->add_option("--p", sim.p, "Covariates besides the constant")->check(CLI::NonNegativeNumber);
  s->add_option("--seed", sim.seed, "Random seed");
  s->add_option("--out", sim.out, "Output directory");
  s->add_option("--dgp", sim.dgp, "JSON file with coefficient laws")->check(CLI::ExistingFile);
  s->add_option("--block-min", sim.block_min, "Smallest spatial cluster");
  s->add_option("--block-max", sim.block_max, "Largest spatial cluster");
  s->add_option("--neighbors", sim.neighbors, "Neighbors on each side within a cluster");

  RunArgs run;
  auto* r = app.add_subcommand("run", "Run the sampler for every configured quantile level");
  r->add_option("--config", run.config, "TOML or JSON run configuration")->required()->check(CLI::ExistingFile);
  r->add_option("--seed", run.seed, "Override the seed");
  r->add_option("--out", run.out, "Override the output directory");
  r->add_option("--tau", run.taus, "Override the quantile levels");
  r->add_option("--sweeps", run.sweeps, "Override retained sweeps");
  r->add_option("--burnin", run.burnin, "Override burn-in sweeps");
  r->add_option("--r-max", run.r_max, "Override the factor cap");
  r->add_flag("--enable-is", run.enable_is, "Store draws and reweight to the exact quantile posterior");

  CheckArgs chk;
  auto* c = app.add_subcommand("check-w", "Validate a weight file and report its block structure");
  c->add_option("file", chk.file, "Weight file")->required()->check(CLI::ExistingFile);
  c->add_flag("--normalize-rows", chk.normalize, "Scale every nonempty row to sum to one");
  c->add_option("--out", chk.out, "Write the (normalized) weights here");

  PostArgs rw;
  auto* w = app.add_subcommand("reweight", "Importance-reweight the stored draws of one quantile level");
  w->add_option("dir", rw.dir, "Quantile output directory (tau_*)")->required()->check(CLI::ExistingDirectory);
  w->add_option("--out", rw.out, "Write reports here instead");
  w->add_option("--threads", rw.threads, "Worker threads (default DSQP_THREADS)");

  PostArgs rp;
  auto* p = app.add_subcommand("report", "Regenerate the report files of one quantile level");
  p->add_option("dir", rp.dir, "Quantile output directory (tau_*)")->required()->check(CLI::ExistingDirectory);
  p->add_option("--out", rp.out, "Write reports here instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*s) return cmd_simulate(sim);
    if (*r) return cmd_run(run);
    if (*c) return cmd_check_w(chk);
    if (*w) return cmd_reweight(rw);
    if (*p) return cmd_report(rp);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return exit_code_for(e);
  }
  return 0;
}
