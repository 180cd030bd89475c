#include "dsqp/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dsqp/distributions.hpp"
#include "dsqp/errors.hpp"

namespace dsqp {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Row-major view of a block inside a packed vector.
Eigen::MatrixXd block_matrix(const Eigen::VectorXd& v, const ParamLayout::Block& b) {
  Eigen::MatrixXd m(b.rows, b.cols);
  for (int r = 0; r < b.rows; ++r)
    for (int c = 0; c < b.cols; ++c) m(r, c) = v[b.offset + static_cast<Eigen::Index>(r) * b.cols + c];
  return m;
}

void put_block(Eigen::VectorXd& v, const ParamLayout::Block& b, const Eigen::MatrixXd& m) {
  for (int r = 0; r < b.rows; ++r)
    for (int c = 0; c < b.cols; ++c) v[b.offset + static_cast<Eigen::Index>(r) * b.cols + c] = m(r, c);
}

double log_normal(double x, double mean, double prec) {
  return 0.5 * std::log(prec / (2.0 * std::numbers::pi)) - 0.5 * prec * (x - mean) * (x - mean);
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return fmt::format("{}", v);
}

// ---------------------------------------------------------------- layout

std::vector<ParamLayout::Block> ParamLayout::blocks() const {
  std::vector<Block> out;
  Eigen::Index off = 0;
  auto add = [&](const char* name, int rows, int cols) {
    out.push_back({name, rows, cols, off});
    off += static_cast<Eigen::Index>(rows) * cols;
  };
  add("rho", n_units, 1);
  add("delta", n_units, 1);
  add("gamma", n_units, 1);
  add("b", n_units, n_covariates);
  add("lambda", n_units, r_max);
  add("f", n_periods, r_max);
  add("phi", r_max, 1);
  add("sigma", 1, 1);
  add("switches", r_max, 1);
  return out;
}

ParamLayout::Block ParamLayout::block(const std::string& name) const {
  for (const auto& b : blocks())
    if (b.name == name) return b;
  throw std::invalid_argument("unknown parameter block " + name);
}

Eigen::Index ParamLayout::packed_size() const {
  const auto bs = blocks();
  return bs.back().offset + bs.back().size();
}

Eigen::VectorXd ParamLayout::pack(const QuantileParams& p) const {
  Eigen::VectorXd v(packed_size());
  put_block(v, block("rho"), p.rho);
  put_block(v, block("delta"), p.delta);
  put_block(v, block("gamma"), p.gamma);
  put_block(v, block("b"), p.b);
  put_block(v, block("lambda"), p.lambda);
  put_block(v, block("f"), p.f);
  put_block(v, block("phi"), p.phi);
  put_block(v, block("sigma"), Eigen::MatrixXd::Constant(1, 1, p.sigma));
  put_block(v, block("switches"), p.switches.cast<double>());
  return v;
}

QuantileParams ParamLayout::unpack(const Eigen::VectorXd& v, double tau, double sigma_q2) const {
  if (v.size() != packed_size()) throw DataError("packed parameter vector has the wrong length");
  auto p = QuantileParams::zeros(tau, n_units, n_periods, n_covariates, r_max);
  p.rho = block_matrix(v, block("rho"));
  p.delta = block_matrix(v, block("delta"));
  p.gamma = block_matrix(v, block("gamma"));
  p.b = block_matrix(v, block("b"));
  p.lambda = block_matrix(v, block("lambda"));
  p.f = block_matrix(v, block("f"));
  p.phi = block_matrix(v, block("phi"));
  p.sigma = v[block("sigma").offset];
  p.switches = Eigen::VectorXd(block_matrix(v, block("switches"))).unaryExpr([](double x) { return std::round(x); }).cast<int>();
  p.sigma_q2 = sigma_q2;
  return p;
}

ParamLayout ParamLayout::of(const QuantileParams& p) {
  ParamLayout l;
  l.n_units = p.n_units();
  l.n_periods = static_cast<int>(p.f.rows());
  l.n_covariates = static_cast<int>(p.b.cols());
  l.r_max = p.r_max();
  return l;
}

nlohmann::json ParamLayout::to_json() const {
  return {{"n_units", n_units}, {"n_periods", n_periods}, {"n_covariates", n_covariates}, {"r_max", r_max}};
}

ParamLayout ParamLayout::from_json(const nlohmann::json& j) {
  ParamLayout l;
  l.n_units = j.at("n_units").get<int>();
  l.n_periods = j.at("n_periods").get<int>();
  l.n_covariates = j.at("n_covariates").get<int>();
  l.r_max = j.at("r_max").get<int>();
  return l;
}

// ---------------------------------------------------------------- rotation

void rotate_factors(const QuantileParams& p, Eigen::MatrixXd& lambda_rot, Eigen::MatrixXd& f_rot) {
  const Eigen::Index n = p.lambda.rows(), t_len = p.f.rows();
  lambda_rot = Eigen::MatrixXd::Zero(n, p.r_max());
  f_rot = Eigen::MatrixXd::Zero(t_len, p.r_max());
  std::vector<int> act;
  for (int j = 0; j < p.r_max(); ++j)
    if (p.switches[j]) act.push_back(j);
  const int ra = static_cast<int>(act.size());
  if (ra == 0) return;
  Eigen::MatrixXd lam(n, ra), f(t_len, ra);
  for (int c = 0; c < ra; ++c) {
    lam.col(c) = p.lambda.col(act[c]);
    f.col(c) = p.f.col(act[c]);
  }
  // F'F/T = R'R, then diagonalize (Lambda R')'(Lambda R').
  const Eigen::MatrixXd ff = f.transpose() * f / static_cast<double>(t_len);
  Eigen::LLT<Eigen::MatrixXd> llt(ff);
  if (llt.info() != Eigen::Success) return;
  const Eigen::MatrixXd r = llt.matrixU();
  const Eigen::MatrixXd lt = lam * r.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(lt.transpose() * lt);
  Eigen::MatrixXd pm = eig.eigenvectors().rowwise().reverse();
  Eigen::MatrixXd lr = lt * pm;
  Eigen::MatrixXd fr = r.triangularView<Eigen::Upper>().solve<Eigen::OnTheRight>(f) * pm;
  for (int c = 0; c < ra; ++c) {
    if (lr.col(c).sum() < 0.0) {
      lr.col(c) *= -1.0;
      fr.col(c) *= -1.0;
    }
  }
  lambda_rot.leftCols(ra) = lr;
  f_rot.leftCols(ra) = fr;
}

// ---------------------------------------------------------------- accumulator

PosteriorAccumulator::PosteriorAccumulator(const ParamLayout& layout) : layout_(layout) {
  const Eigen::Index n = layout_.packed_size();
  const Eigen::Index nr = static_cast<Eigen::Index>(layout_.r_max) * (layout_.n_units + layout_.n_periods);
  shift_ = sum_ = sum_sq_ = Eigen::VectorXd::Zero(n);
  rot_shift_ = rot_sum_ = rot_sum_sq_ = Eigen::VectorXd::Zero(nr);
  count_tally_ = Eigen::VectorXd::Zero(layout_.r_max + 1);
}

void PosteriorAccumulator::accumulate(const QuantileParams& p) {
  if (!(ParamLayout::of(p) == layout_)) throw std::invalid_argument("snapshot does not match the accumulator layout");
  const Eigen::VectorXd v = layout_.pack(p);
  Eigen::MatrixXd lr, fr;
  rotate_factors(p, lr, fr);
  Eigen::VectorXd rv(rot_sum_.size());
  rv << Eigen::Map<const Eigen::VectorXd>(lr.data(), lr.size()), Eigen::Map<const Eigen::VectorXd>(fr.data(), fr.size());
  if (count_ == 0) {
    shift_ = v;
    rot_shift_ = rv;
  }
  const Eigen::VectorXd d = v - shift_;
  sum_ += d;
  sum_sq_ += d.cwiseProduct(d);
  const Eigen::VectorXd dr = rv - rot_shift_;
  rot_sum_ += dr;
  rot_sum_sq_ += dr.cwiseProduct(dr);
  count_tally_[p.active_factors()] += 1.0;
  ++count_;
}

Eigen::VectorXd PosteriorAccumulator::mean() const {
  if (count_ == 0) return Eigen::VectorXd::Constant(sum_.size(), std::nan(""));
  return shift_ + sum_ / static_cast<double>(count_);
}

Eigen::VectorXd PosteriorAccumulator::variance() const {
  if (count_ < 2) return Eigen::VectorXd::Zero(sum_.size());
  const double n = static_cast<double>(count_);
  return ((sum_sq_ - sum_.cwiseProduct(sum_) / n) / (n - 1.0)).cwiseMax(0.0);
}

Eigen::MatrixXd PosteriorAccumulator::block_mean(const std::string& name) const {
  return block_matrix(mean(), layout_.block(name));
}

Eigen::MatrixXd PosteriorAccumulator::block_sd(const std::string& name) const {
  return block_matrix(variance().cwiseSqrt(), layout_.block(name));
}

Eigen::MatrixXd PosteriorAccumulator::rotated_mean(bool loadings) const {
  const Eigen::VectorXd m = count_ ? Eigen::VectorXd(rot_shift_ + rot_sum_ / static_cast<double>(count_))
                                   : Eigen::VectorXd::Zero(rot_sum_.size());
  const Eigen::Index nl = static_cast<Eigen::Index>(layout_.n_units) * layout_.r_max;
  if (loadings) return Eigen::Map<const Eigen::MatrixXd>(m.data(), layout_.n_units, layout_.r_max);
  return Eigen::Map<const Eigen::MatrixXd>(m.data() + nl, layout_.n_periods, layout_.r_max);
}

Eigen::MatrixXd PosteriorAccumulator::rotated_sd(bool loadings) const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(rot_sum_.size());
  if (count_ >= 2) {
    const double n = static_cast<double>(count_);
    v = ((rot_sum_sq_ - rot_sum_.cwiseProduct(rot_sum_) / n) / (n - 1.0)).cwiseMax(0.0).cwiseSqrt();
  }
  const Eigen::Index nl = static_cast<Eigen::Index>(layout_.n_units) * layout_.r_max;
  if (loadings) return Eigen::Map<const Eigen::MatrixXd>(v.data(), layout_.n_units, layout_.r_max);
  return Eigen::Map<const Eigen::MatrixXd>(v.data() + nl, layout_.n_periods, layout_.r_max);
}

Eigen::VectorXd PosteriorAccumulator::factor_count_distribution() const {
  if (count_ == 0) return Eigen::VectorXd::Zero(count_tally_.size());
  return count_tally_ / static_cast<double>(count_);
}

int PosteriorAccumulator::factor_count_mode() const {
  Eigen::Index k = 0;
  if (count_tally_.size()) count_tally_.maxCoeff(&k);
  return static_cast<int>(k);
}

nlohmann::json PosteriorAccumulator::to_json() const {
  return {{"layout", layout_.to_json()},       {"count", count_},
          {"shift", vec_json(shift_)},         {"sum", vec_json(sum_)},
          {"sum_sq", vec_json(sum_sq_)},       {"rot_shift", vec_json(rot_shift_)},
          {"rot_sum", vec_json(rot_sum_)},     {"rot_sum_sq", vec_json(rot_sum_sq_)},
          {"count_tally", vec_json(count_tally_)}};
}

PosteriorAccumulator PosteriorAccumulator::from_json(const nlohmann::json& j) {
  try {
    PosteriorAccumulator a(ParamLayout::from_json(j.at("layout")));
    a.count_ = j.at("count").get<long>();
    a.shift_ = json_vec(j.at("shift"));
    a.sum_ = json_vec(j.at("sum"));
    a.sum_sq_ = json_vec(j.at("sum_sq"));
    a.rot_shift_ = json_vec(j.at("rot_shift"));
    a.rot_sum_ = json_vec(j.at("rot_sum"));
    a.rot_sum_sq_ = json_vec(j.at("rot_sum_sq"));
    a.count_tally_ = json_vec(j.at("count_tally"));
    const Eigen::Index n = a.layout_.packed_size();
    if (a.shift_.size() != n || a.sum_.size() != n || a.sum_sq_.size() != n ||
        a.count_tally_.size() != a.layout_.r_max + 1 || a.rot_sum_.size() != a.rot_shift_.size())
      throw DataError("accumulator JSON has inconsistent sizes");
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed accumulator JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------- draw file

DrawFile::DrawFile(const ParamLayout& layout, double tau, double sigma_q2)
    : layout_(layout), tau_(tau), sigma_q2_(sigma_q2) {}

void DrawFile::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  nlohmann::json header = {{"layout", layout_.to_json()},
                           {"tau", tau_},
                           {"sigma_q2", sigma_q2_},
                           {"count", draws_.size()},
                           {"record", "sweep:int64, loglik_pseudo:float64, packed:float64[packed_size]"}};
  const std::string h = header.dump();
  const auto hlen = static_cast<std::uint64_t>(h.size());
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  const Eigen::Index n = layout_.packed_size();
  for (const auto& d : draws_) {
    if (d.packed.size() != n) throw std::invalid_argument("draw record has the wrong length");
    const auto sweep = static_cast<std::int64_t>(d.sweep);
    out.write(reinterpret_cast<const char*>(&sweep), sizeof sweep);
    out.write(reinterpret_cast<const char*>(&d.loglik_pseudo), sizeof(double));
    out.write(reinterpret_cast<const char*>(d.packed.data()), static_cast<std::streamsize>(n * sizeof(double)));
  }
  if (!out) throw DataError("failed while writing " + path.string());
}

DrawFile DrawFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw DataError(path.string() + " is not a draw file");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != kVersion) throw DataError("unsupported draw file version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!in || hlen > (1u << 26)) throw DataError("corrupt draw file header");
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated draw file header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt draw file header: ") + e.what());
  }
  DrawFile f(ParamLayout::from_json(header.at("layout")), header.at("tau").get<double>(),
             header.at("sigma_q2").get<double>());
  const auto count = header.at("count").get<std::size_t>();
  const Eigen::Index n = f.layout_.packed_size();
  f.draws_.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    DrawRecord d;
    std::int64_t sweep = 0;
    d.packed.resize(n);
    in.read(reinterpret_cast<char*>(&sweep), sizeof sweep);
    in.read(reinterpret_cast<char*>(&d.loglik_pseudo), sizeof(double));
    in.read(reinterpret_cast<char*>(d.packed.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw DataError("truncated draw file at record " + std::to_string(k));
    d.sweep = static_cast<long>(sweep);
    f.draws_.push_back(std::move(d));
  }
  return f;
}

// ---------------------------------------------------------------- reweighting

Eigen::VectorXd ImportanceWeights::normalized() const {
  if (log_w.size() == 0) return {};
  const double m = log_w.maxCoeff();
  if (m == kNegInf) return Eigen::VectorXd::Constant(log_w.size(), std::nan(""));
  const Eigen::VectorXd w = (log_w.array() - m).exp();
  return w / w.sum();
}

double effective_sample_size(const Eigen::VectorXd& log_w) {
  if (log_w.size() == 0) return 0.0;
  const double m = log_w.maxCoeff();
  if (m == kNegInf) return 0.0;
  const Eigen::ArrayXd w = (log_w.array() - m).exp();
  return w.sum() * w.sum() / w.square().sum();
}

double log_prior_density(const QuantileParams& p, const PriorConfig& prior_in) {
  PriorConfig prior = prior_in;
  prior.resolve(static_cast<int>(p.b.cols()));
  double lp = 0.0;
  for (int i = 0; i < p.n_units(); ++i) {
    lp += log_normal(p.gamma[i], prior.m_gamma, prior.h_gamma);
    lp += log_normal(p.delta[i], prior.m_delta, prior.h_delta);
    lp += log_normal(p.rho[i], prior.m_rho, prior.h_rho);
  }
  const Eigen::LLT<Eigen::MatrixXd> hb(prior.H_b);
  const double logdet_h = 2.0 * Eigen::VectorXd(hb.matrixL().toDenseMatrix().diagonal()).array().log().sum();
  const int k = static_cast<int>(p.b.cols());
  for (int i = 0; i < p.n_units(); ++i) {
    const Eigen::VectorXd d = p.b.row(i).transpose() - prior.m_b;
    lp += 0.5 * logdet_h - 0.5 * k * std::log(2.0 * std::numbers::pi) - 0.5 * d.dot(prior.H_b * d);
  }
  int col = 0;
  for (int j = 0; j < p.r_max(); ++j) {
    const bool active = p.switches[j] != 0;
    for (int i = 0; i < p.n_units(); ++i) {
      if (active && i < col) continue;  // structural zero
      lp += log_normal(p.lambda(i, j), 0.0, prior.h_lambda);
      if (active && i == col) lp += std::log(2.0);
    }
    if (active) ++col;
    lp += std::log(0.5);  // phi uniform on (-1, 1)
    const Eigen::Index t_len = p.f.rows();
    if (t_len > 0) lp += log_normal(p.f(0, j), 0.0, prior.h_f);
    for (Eigen::Index t = 1; t < t_len; ++t) lp += log_normal(p.f(t, j), p.phi[j] * p.f(t - 1, j), 1.0);
    lp += active ? std::log(prior.pi_switch) : std::log1p(-prior.pi_switch);
  }
  lp += gamma_log_pdf(p.sigma, prior.v_sigma, prior.s_sigma);
  return lp;
}

ReweightResult importance_reweight(const DrawFile& draws, const PanelData& data, const SpatialWeights& w,
                                   const PriorConfig& prior, int threads) {
  const auto& recs = draws.draws();
  const auto n = static_cast<Eigen::Index>(recs.size());
  if (n == 0) throw RunTooShort("no retained draws to reweight");
  const ParamLayout& layout = draws.layout();
  if (layout.n_units != data.n_units() || layout.n_periods != data.n_periods() ||
      layout.n_covariates != data.n_covariates())
    throw DataError("draw file does not match the panel dimensions");
  ReweightResult out;
  out.weights.log_w.resize(n);
  out.log_prior.resize(n);
  const SpatialWeights wb = w.blockalized() ? w : bfs_blockalize(w);
  auto work = [&](Eigen::Index lo, Eigen::Index hi) {
    for (Eigen::Index k = lo; k < hi; ++k) {
      const QuantileParams p = layout.unpack(recs[k].packed, draws.tau(), draws.sigma_q2());
      out.log_prior[k] = log_prior_density(p, prior);
      double log_w = kNegInf;
      try {
        const Eigen::MatrixXd q = quantile_recursion(p, data, wb);
        const double loss = quantile_loss(data.y, q, p.tau);
        log_w = -loss - recs[k].loglik_pseudo;
        if (!std::isfinite(log_w)) log_w = kNegInf;
      } catch (const NumericalError&) {
      }
      out.weights.log_w[k] = log_w;
    }
  };
  const int nt = std::clamp<int>(threads, 1, static_cast<int>(std::max<Eigen::Index>(1, n)));
  if (nt == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const Eigen::Index chunk = (n + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
      const Eigen::Index lo = t * chunk, hi = std::min(n, lo + chunk);
      if (lo < hi) pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  out.weights.ess = effective_sample_size(out.weights.log_w);
  const Eigen::VectorXd wn = out.weights.normalized();
  const Eigen::Index m = layout.packed_size();
  out.mean = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(m);
  if (wn.allFinite()) {
    // Centre on the first draw for stability.
    const Eigen::VectorXd& c = recs[0].packed;
    for (Eigen::Index k = 0; k < n; ++k) {
      const Eigen::VectorXd d = recs[k].packed - c;
      out.mean += wn[k] * d;
      sq += wn[k] * d.cwiseProduct(d);
    }
    out.sd = (sq - out.mean.cwiseProduct(out.mean)).cwiseMax(0.0).cwiseSqrt();
    out.mean += c;
  } else {
    out.mean.setConstant(std::nan(""));
    out.sd = out.mean;
  }
  out.degenerate = out.ess_ratio() < 0.05;
  if (out.degenerate)
    spdlog::warn("importance weights are degenerate: ESS/count = {:.4f} (tau = {})", out.ess_ratio(), draws.tau());
  return out;
}

// ---------------------------------------------------------------- report

namespace {

nlohmann::json stationarity_json(const StationarityReport& s) {
  return {{"spectral_radius", s.spectral_radius},
          {"stationary", s.stationary},
          {"converged", s.converged},
          {"iterations", s.iterations}};
}

StationarityReport stationarity_from(const nlohmann::json& j) {
  StationarityReport s;
  s.spectral_radius = j.at("spectral_radius").get<double>();
  s.stationary = j.at("stationary").get<bool>();
  s.converged = j.at("converged").get<bool>();
  s.iterations = j.at("iterations").get<int>();
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << body;
}

std::string block_csv(const ParamLayout& layout, const Eigen::VectorXd& values, const char* column,
                      const Eigen::MatrixXd* lambda_rot, const Eigen::MatrixXd* f_rot) {
  std::string s = fmt::format("block,row,col,{}\n", column);
  for (const auto& b : layout.blocks()) {
    const Eigen::MatrixXd m = block_matrix(values, b);
    for (int r = 0; r < b.rows; ++r)
      for (int c = 0; c < b.cols; ++c) s += fmt::format("{},{},{},{}\n", b.name, r, c, format_double(m(r, c)));
  }
  auto extra = [&](const char* name, const Eigen::MatrixXd* m) {
    if (!m) return;
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) s += fmt::format("{},{},{},{}\n", name, r, c, format_double((*m)(r, c)));
  };
  extra("lambda_rotated", lambda_rot);
  extra("f_rotated", f_rot);
  return s;
}

}  // namespace

nlohmann::json RunRecord::to_json() const {
  auto tr = nlohmann::json::array();
  for (const auto& d : trace)
    tr.push_back({{"sweep", d.sweep},
                  {"r2_randomization", d.r2_randomization},
                  {"accept_rate_rho", d.accept_rate_rho},
                  {"accept_rate_sigma", d.accept_rate_sigma},
                  {"loglik_pseudo", d.loglik_pseudo},
                  {"sigma", d.sigma},
                  {"sigma_q2", d.sigma_q2},
                  {"active_factors", d.active_factors},
                  {"rho_fallbacks", d.rho_fallbacks}});
  nlohmann::json j = {{"tau", tau},
                      {"config", config},
                      {"trace", tr},
                      {"n_burnin", n_burnin},
                      {"sigma_q2", sigma_q2},
                      {"init_stationarity", stationarity_json(init_stationarity)},
                      {"mean_stationarity", stationarity_json(mean_stationarity)},
                      {"inverse_norm1", inverse_norm1},
                      {"inverse_norm_inf", inverse_norm_inf},
                      {"unit_ids", unit_ids},
                      {"has_is", has_is}};
  if (has_is) {
    j["is"] = {{"log_w", vec_json(is.weights.log_w)},
               {"ess", is.weights.ess},
               {"mean", vec_json(is.mean)},
               {"sd", vec_json(is.sd)},
               {"log_prior", vec_json(is.log_prior)},
               {"degenerate", is.degenerate}};
  }
  return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  try {
    RunRecord r;
    r.tau = j.at("tau").get<double>();
    r.config = j.value("config", nlohmann::json::object());
    for (const auto& d : j.at("trace")) {
      SweepDiagnostics s;
      s.sweep = d.at("sweep").get<long>();
      s.r2_randomization = d.at("r2_randomization").get<double>();
      s.accept_rate_rho = d.at("accept_rate_rho").get<double>();
      s.accept_rate_sigma = d.at("accept_rate_sigma").get<double>();
      s.loglik_pseudo = d.at("loglik_pseudo").get<double>();
      s.sigma = d.at("sigma").get<double>();
      s.sigma_q2 = d.at("sigma_q2").get<double>();
      s.active_factors = d.at("active_factors").get<int>();
      s.rho_fallbacks = d.at("rho_fallbacks").get<int>();
      r.trace.push_back(s);
    }
    r.n_burnin = j.at("n_burnin").get<long>();
    r.sigma_q2 = j.at("sigma_q2").get<double>();
    r.init_stationarity = stationarity_from(j.at("init_stationarity"));
    r.mean_stationarity = stationarity_from(j.at("mean_stationarity"));
    r.inverse_norm1 = j.at("inverse_norm1").get<double>();
    r.inverse_norm_inf = j.at("inverse_norm_inf").get<double>();
    r.unit_ids = j.at("unit_ids").get<std::vector<std::string>>();
    r.has_is = j.at("has_is").get<bool>();
    if (r.has_is) {
      const auto& is = j.at("is");
      r.is.weights.log_w = json_vec(is.at("log_w"));
      r.is.weights.ess = is.at("ess").get<double>();
      r.is.mean = json_vec(is.at("mean"));
      r.is.sd = json_vec(is.at("sd"));
      r.is.log_prior = json_vec(is.at("log_prior"));
      r.is.degenerate = is.at("degenerate").get<bool>();
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed run record: ") + e.what());
  }
}

nlohmann::json diagnostics_document(const PosteriorAccumulator& acc, const RunRecord& run) {
  if (acc.count() == 0) throw RunTooShort("no retained sweeps; increase n_sweeps or reduce thinning");
  double rho_acc = 0.0, sigma_acc = 0.0;
  long retained_sweeps = 0, fallbacks = 0;
  std::vector<double> r2, ll, sig;
  for (const auto& d : run.trace) {
    r2.push_back(d.r2_randomization);
    ll.push_back(d.loglik_pseudo);
    sig.push_back(d.sigma);
    fallbacks += d.rho_fallbacks;
    if (d.sweep >= run.n_burnin) {
      rho_acc += d.accept_rate_rho;
      sigma_acc += d.accept_rate_sigma;
      ++retained_sweeps;
    }
  }
  const double denom = std::max<long>(retained_sweeps, 1);
  const Eigen::VectorXd fc = acc.factor_count_distribution();
  nlohmann::json doc = {
      {"format_version", 1},
      {"tau", run.tau},
      {"layout", acc.layout().to_json()},
      {"tracked_values", acc.layout().tracked_values()},
      {"retained_draws", acc.count()},
      {"n_sweeps_total", run.trace.size()},
      {"n_burnin", run.n_burnin},
      {"sigma_q2", run.sigma_q2},
      {"acceptance", {{"rho", rho_acc / denom}, {"sigma", sigma_acc / denom}, {"rho_fallback_updates", fallbacks}}},
      {"traces", {{"r2_randomization", r2}, {"loglik_pseudo", ll}, {"sigma", sig}}},
      {"stationarity",
       {{"initial", stationarity_json(run.init_stationarity)},
        {"posterior_mean", stationarity_json(run.mean_stationarity)},
        {"inverse_norm1_estimate", run.inverse_norm1},
        {"inverse_norm_inf_estimate", run.inverse_norm_inf}}},
      {"factor_count", {{"distribution", std::vector<double>(fc.data(), fc.data() + fc.size())},
                        {"mode", acc.factor_count_mode()}}},
      {"config", run.config}};
  if (run.has_is) {
    doc["importance_sampling"] = {{"draws", run.is.weights.log_w.size()},
                                  {"ess", run.is.weights.ess},
                                  {"ess_ratio", run.is.ess_ratio()},
                                  {"degenerate", run.is.degenerate}};
  } else {
    doc["importance_sampling"] = nullptr;
  }
  return doc;
}

void run_report(const PosteriorAccumulator& acc, const RunRecord& run, const std::filesystem::path& dir) {
  const nlohmann::json doc = diagnostics_document(acc, run);
  std::filesystem::create_directories(dir);
  const ParamLayout& layout = acc.layout();
  const Eigen::MatrixXd lm = acc.rotated_mean(true), fm = acc.rotated_mean(false);
  const Eigen::MatrixXd ls = acc.rotated_sd(true), fs = acc.rotated_sd(false);
  write_text(dir / "posterior_means.csv", block_csv(layout, acc.mean(), "mean", &lm, &fm));
  write_text(dir / "posterior_sds.csv", block_csv(layout, acc.variance().cwiseSqrt(), "sd", &ls, &fs));

  std::string fc = "count,probability\n";
  const Eigen::VectorXd dist = acc.factor_count_distribution();
  for (Eigen::Index k = 0; k < dist.size(); ++k) fc += fmt::format("{},{}\n", k, format_double(dist[k]));
  write_text(dir / "factor_count.csv", fc);

  std::string ru = "unit,rho_mean,rho_sd\n";
  const Eigen::MatrixXd rm = acc.block_mean("rho"), rs = acc.block_sd("rho");
  for (int i = 0; i < layout.n_units; ++i) {
    const std::string id = i < static_cast<int>(run.unit_ids.size()) ? run.unit_ids[i] : std::to_string(i);
    ru += fmt::format("{},{},{}\n", id, format_double(rm(i, 0)), format_double(rs(i, 0)));
  }
  write_text(dir / "rho_units.csv", ru);

  if (run.has_is) {
    std::string s = "block,row,col,mean,sd\n";
    for (const auto& b : layout.blocks()) {
      const Eigen::MatrixXd m = block_matrix(run.is.mean, b), sd = block_matrix(run.is.sd, b);
      for (int r = 0; r < b.rows; ++r)
        for (int c = 0; c < b.cols; ++c)
          s += fmt::format("{},{},{},{},{}\n", b.name, r, c, format_double(m(r, c)), format_double(sd(r, c)));
    }
    write_text(dir / "posterior_means_is.csv", s);
  }
  write_text(dir / "diagnostics.json", doc.dump(2) + "\n");
}

}  // namespace dsqp
