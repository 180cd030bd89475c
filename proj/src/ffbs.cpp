#include "dsqp/ffbs.hpp"

#include <string>

#include "dsqp/errors.hpp"

namespace dsqp {

Eigen::MatrixXd safe_cholesky(const Eigen::MatrixXd& a, const char* what) {
  Eigen::MatrixXd s = 0.5 * (a + a.transpose());
  if (!s.allFinite()) throw FilterDivergence(std::string(what) + ": non-finite covariance");
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  const double scale = std::max(s.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  for (double jitter = 1e-12; jitter <= 1e-8; jitter *= 10.0) {
    s.diagonal().array() += jitter * scale;
    llt.compute(s);
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  throw FilterDivergence(std::string(what) + ": covariance lost positive definiteness");
}

namespace {

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a, const char* what) {
  const Eigen::MatrixXd l = safe_cholesky(a, what);
  const Eigen::MatrixXd li = l.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
  return li.transpose() * li;
}

Eigen::VectorXd offset_at(const Eigen::MatrixXd& offsets, int t, Eigen::Index m) {
  return offsets.size() == 0 ? Eigen::VectorXd::Zero(m) : Eigen::VectorXd(offsets.col(t));
}

// Smoothing gain J = C F' (F C F' + Qn)^{-1} and the one-step prediction.
struct Gain {
  Eigen::MatrixXd j;
  Eigen::VectorXd pred_mean;
  Eigen::MatrixXd pred_cov;
};

Gain gain(const Eigen::VectorXd& m, const Eigen::MatrixXd& c, const Eigen::MatrixXd& F, const Eigen::VectorXd& off,
          const Eigen::MatrixXd& Qn) {
  Gain g;
  g.pred_mean = F * m + off;
  const Eigen::MatrixXd cf = c * F.transpose();
  g.pred_cov = F * cf + Qn;
  const Eigen::MatrixXd l = safe_cholesky(g.pred_cov, "backward pass");
  // J' = P^{-1} F C
  Eigen::MatrixXd jt = l.triangularView<Eigen::Lower>().solve(cf.transpose());
  l.transpose().triangularView<Eigen::Upper>().solveInPlace(jt);
  g.j = jt.transpose();
  return g;
}

}  // namespace

FilteredPath filter_identity_obs(const Eigen::MatrixXd& F, const Eigen::MatrixXd& offsets, const Eigen::MatrixXd& Qn,
                                 const Eigen::MatrixXd& z, const Eigen::MatrixXd& r) {
  const Eigen::Index m = z.rows();
  const int t_len = static_cast<int>(z.cols());
  FilteredPath out;
  out.mean.reserve(t_len);
  out.cov.reserve(t_len);
  Eigen::VectorXd a = offset_at(offsets, 0, m);
  Eigen::MatrixXd p = Qn;
  for (int t = 0; t < t_len; ++t) {
    if (t > 0) {
      a = F * out.mean.back() + offset_at(offsets, t, m);
      p = F * out.cov.back() * F.transpose() + Qn;
    }
    Eigen::MatrixXd s = p;
    s.diagonal() += r.col(t);
    const Eigen::MatrixXd l = safe_cholesky(s, "filter innovation");
    // K' = S^{-1} P
    Eigen::MatrixXd kt = l.triangularView<Eigen::Lower>().solve(p);
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(kt);
    Eigen::VectorXd mean = a + kt.transpose() * (z.col(t) - a);
    Eigen::MatrixXd cov = p - p * kt;
    cov = 0.5 * (cov + cov.transpose());
    out.mean.push_back(std::move(mean));
    out.cov.push_back(std::move(cov));
  }
  return out;
}

FilteredPath filter_factors(const Eigen::VectorXd& phi, double h0, const Eigen::MatrixXd& H, double obs_var,
                            const Eigen::MatrixXd& z) {
  const Eigen::Index r = phi.size();
  const int t_len = static_cast<int>(z.cols());
  const Eigen::MatrixXd hth = H.transpose() * H / obs_var;
  const Eigen::MatrixXd hty = H.transpose() * z / obs_var;
  FilteredPath out;
  out.mean.reserve(t_len);
  out.cov.reserve(t_len);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(r);
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(r, r) / h0;
  for (int t = 0; t < t_len; ++t) {
    if (t > 0) {
      a = phi.cwiseProduct(out.mean.back());
      p = phi.asDiagonal() * out.cov.back() * phi.asDiagonal();
      p.diagonal().array() += 1.0;
    }
    const Eigen::MatrixXd p_inv = spd_inverse(p, "factor prediction");
    const Eigen::MatrixXd cov = spd_inverse(p_inv + hth, "factor posterior");
    out.mean.push_back(cov * (p_inv * a + hty.col(t)));
    out.cov.push_back(0.5 * (cov + cov.transpose()));
  }
  return out;
}

Eigen::MatrixXd backward_sample(const FilteredPath& path, const Eigen::MatrixXd& F, const Eigen::MatrixXd& offsets,
                                const Eigen::MatrixXd& Qn, Rng& rng) {
  const int t_len = path.length();
  if (t_len == 0) return {};
  const Eigen::Index m = path.mean[0].size();
  Eigen::MatrixXd x(m, t_len);
  Eigen::VectorXd z(m);
  auto draw = [&](const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    for (Eigen::Index k = 0; k < m; ++k) z[k] = rng.normal();
    return Eigen::VectorXd(mean + safe_cholesky(cov, "backward draw") * z);
  };
  x.col(t_len - 1) = draw(path.mean[t_len - 1], path.cov[t_len - 1]);
  for (int t = t_len - 2; t >= 0; --t) {
    const Gain g = gain(path.mean[t], path.cov[t], F, offset_at(offsets, t + 1, m), Qn);
    const Eigen::VectorXd mean = path.mean[t] + g.j * (x.col(t + 1) - g.pred_mean);
    const Eigen::MatrixXd cov = path.cov[t] - g.j * F * path.cov[t];
    x.col(t) = draw(mean, cov);
  }
  return x;
}

SmoothedPath rts_smooth(const FilteredPath& path, const Eigen::MatrixXd& F, const Eigen::MatrixXd& offsets,
                        const Eigen::MatrixXd& Qn) {
  const int t_len = path.length();
  SmoothedPath out;
  out.mean = path.mean;
  out.cov = path.cov;
  if (t_len == 0) return out;
  const Eigen::Index m = path.mean[0].size();
  for (int t = t_len - 2; t >= 0; --t) {
    const Gain g = gain(path.mean[t], path.cov[t], F, offset_at(offsets, t + 1, m), Qn);
    out.mean[t] = path.mean[t] + g.j * (out.mean[t + 1] - g.pred_mean);
    Eigen::MatrixXd c = path.cov[t] + g.j * (out.cov[t + 1] - g.pred_cov) * g.j.transpose();
    out.cov[t] = 0.5 * (c + c.transpose());
  }
  return out;
}

}  // namespace dsqp
