#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsqp/gibbs.hpp"
#include "dsqp/io.hpp"
#include "dsqp/posterior.hpp"

namespace dsqp {

struct RunConfig {
  std::filesystem::path data;
  std::filesystem::path weights;  // empty means no spatial links
  PanelSchema schema;
  std::vector<double> taus{0.01, 0.05, 0.5, 0.95, 0.99};
  SamplerConfig sampler;
  PriorConfig prior;
  std::filesystem::path output = "dsqp_out";
  bool enable_is = false;
  int progress_every = 100;  // sweeps between progress lines, 0 disables

  void validate() const;
  /// Every field with defaults filled in; echoed into diagnostics.json.
  nlohmann::json to_json() const;
  /// Relative paths are resolved against base_dir.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

/// TOML or JSON, chosen by extension (.toml / .json).
nlohmann::json load_config_document(const std::filesystem::path& path);
RunConfig load_run_config(const std::filesystem::path& path);

/// Sub-directory name for one quantile level, e.g. tau_0.5.
std::string tau_dirname(double tau);

/// Result of one quantile-level chain held in memory.
struct QuantileRun {
  PosteriorAccumulator accumulator;
  RunRecord record;
  DrawFile draws;
  SamplerState final_state;
};

/// Runs one chain: initialization checks, optional sigma_q2 tuning, burn-in, retained
/// sweeps, accumulation and optional reweighting. Nothing is written to disk.
QuantileRun run_quantile(const GibbsEngine& engine, double tau, bool enable_is, int progress_every = 0,
                         const nlohmann::json& config_echo = {});

/// Writes the report files, accumulator.json, run.json and (with IS) draws.bin.
void write_quantile_outputs(const QuantileRun& run, const std::filesystem::path& dir);

/// Worker count from DSQP_THREADS (default: hardware concurrency), at least 1.
int worker_threads();

/// Every tau in parallel, each into output/tau_<tau>. Returns 0 on success or the
/// exit code of the first failure; failed levels get an error.json.
int run_all(const RunConfig& config);

/// Exit code for an exception: 2 config, 3 numerical, 4 data.
int exit_code_for(const std::exception& e);

}  // namespace dsqp
