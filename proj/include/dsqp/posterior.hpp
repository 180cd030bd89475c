#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dsqp/gibbs.hpp"
#include "dsqp/panel.hpp"
#include "dsqp/spatial.hpp"

namespace dsqp {

/// Shape of the packed parameter vector.
struct ParamLayout {
  int n_units = 0;
  int n_periods = 0;
  int n_covariates = 0;  // p + 1
  int r_max = 0;

  struct Block {
    std::string name;
    int rows = 0;
    int cols = 0;
    Eigen::Index offset = 0;
    Eigen::Index size() const { return static_cast<Eigen::Index>(rows) * cols; }
  };

  /// rho, delta, gamma, b, lambda, f, phi, sigma, switches; matrices row-major.
  std::vector<Block> blocks() const;
  Block block(const std::string& name) const;
  Eigen::Index packed_size() const;
  /// 3N + N(p+1) + r_max(T + N).
  Eigen::Index tracked_values() const { return 3L * n_units + 1L * n_units * n_covariates + 1L * r_max * (n_periods + n_units); }

  Eigen::VectorXd pack(const QuantileParams& p) const;
  /// Inverse of pack; tau and sigma_q2 are taken from the arguments.
  QuantileParams unpack(const Eigen::VectorXd& v, double tau, double sigma_q2) const;

  static ParamLayout of(const QuantileParams& p);
  nlohmann::json to_json() const;
  static ParamLayout from_json(const nlohmann::json& j);
  bool operator==(const ParamLayout&) const = default;
};

/// Active loadings and factors rotated so that F'F/T = I and Lambda'Lambda is diagonal
/// with descending entries. Inactive columns come back as zeros.
void rotate_factors(const QuantileParams& p, Eigen::MatrixXd& lambda_rot, Eigen::MatrixXd& f_rot);

/// Streaming first and second moments around the first retained snapshot.
class PosteriorAccumulator {
 public:
  PosteriorAccumulator() = default;
  explicit PosteriorAccumulator(const ParamLayout& layout);

  void accumulate(const QuantileParams& p);

  const ParamLayout& layout() const { return layout_; }
  long count() const { return count_; }
  /// Packed means and sample variances (n - 1 denominator, clamped at zero).
  Eigen::VectorXd mean() const;
  Eigen::VectorXd variance() const;
  Eigen::MatrixXd block_mean(const std::string& name) const;
  Eigen::MatrixXd block_sd(const std::string& name) const;
  /// Rotated loadings and factors (N x r_max, T x r_max).
  Eigen::MatrixXd rotated_mean(bool loadings) const;
  Eigen::MatrixXd rotated_sd(bool loadings) const;
  /// Probability of each active-factor count 0..r_max.
  Eigen::VectorXd factor_count_distribution() const;
  int factor_count_mode() const;

  nlohmann::json to_json() const;
  static PosteriorAccumulator from_json(const nlohmann::json& j);

 private:
  ParamLayout layout_;
  long count_ = 0;
  Eigen::VectorXd shift_, sum_, sum_sq_;
  Eigen::VectorXd rot_shift_, rot_sum_, rot_sum_sq_;
  Eigen::VectorXd count_tally_;
};

/// One retained draw as needed for reweighting.
struct DrawRecord {
  long sweep = 0;
  double loglik_pseudo = 0.0;  // sum log ALD(y - Q_draw; tau, sigma)
  Eigen::VectorXd packed;
};

/// Versioned binary file of retained draws.
class DrawFile {
 public:
  static constexpr char kMagic[9] = "DSQPDRW1";
  static constexpr std::uint32_t kVersion = 1;

  DrawFile() = default;
  DrawFile(const ParamLayout& layout, double tau, double sigma_q2);

  void add(const DrawRecord& r) { draws_.push_back(r); }
  const std::vector<DrawRecord>& draws() const { return draws_; }
  const ParamLayout& layout() const { return layout_; }
  double tau() const { return tau_; }
  double sigma_q2() const { return sigma_q2_; }

  void save(const std::filesystem::path& path) const;
  /// Throws DataError on a bad magic, version or truncated payload.
  static DrawFile load(const std::filesystem::path& path);

 private:
  ParamLayout layout_;
  double tau_ = 0.5;
  double sigma_q2_ = 0.0;
  std::vector<DrawRecord> draws_;
};

struct ImportanceWeights {
  Eigen::VectorXd log_w;
  double ess = 0.0;
  /// Self-normalized weights summing to one.
  Eigen::VectorXd normalized() const;
};

struct ReweightResult {
  ImportanceWeights weights;
  Eigen::VectorXd mean;      // packed reweighted means
  Eigen::VectorXd sd;        // packed reweighted sds
  Eigen::VectorXd log_prior; // reporting only; cancels in the weights
  bool degenerate = false;   // ESS / count < 0.05
  double ess_ratio() const { return weights.log_w.size() ? weights.ess / weights.log_w.size() : 0.0; }
};

/// Effective sample size (sum w)^2 / sum w^2 from log weights.
double effective_sample_size(const Eigen::VectorXd& log_w);

/// Log prior density of one draw (Gaussian, truncated Gaussian, Gamma and Bernoulli parts).
double log_prior_density(const QuantileParams& p, const PriorConfig& prior);

/// Weights exp(-loss(theta)) / prod ALD(y - Q_draw), with the loss evaluated on the
/// deterministic recursion. Draws are processed in parallel over `threads` workers.
ReweightResult importance_reweight(const DrawFile& draws, const PanelData& data, const SpatialWeights& w,
                                   const PriorConfig& prior, int threads = 1);

/// Everything a report needs besides the accumulator.
struct RunRecord {
  double tau = 0.5;
  nlohmann::json config;  // echoed configuration
  std::vector<SweepDiagnostics> trace;  // all sweeps including burn-in
  long n_burnin = 0;
  double sigma_q2 = 0.0;
  StationarityReport init_stationarity;
  StationarityReport mean_stationarity;
  double inverse_norm1 = 0.0;
  double inverse_norm_inf = 0.0;
  std::vector<std::string> unit_ids;
  bool has_is = false;
  ReweightResult is;

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

/// Writes posterior_means.csv, posterior_sds.csv, factor_count.csv, rho_units.csv and
/// diagnostics.json (plus posterior_means_is.csv when reweighted). Throws RunTooShort
/// when nothing was retained.
void run_report(const PosteriorAccumulator& acc, const RunRecord& run, const std::filesystem::path& dir);

/// The diagnostics document written by run_report.
nlohmann::json diagnostics_document(const PosteriorAccumulator& acc, const RunRecord& run);

/// Shortest round-trip decimal form, shared by every CSV writer.
std::string format_double(double v);

}  // namespace dsqp
