#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dsqp/rng.hpp"

namespace dsqp {

/// Filtered moments x_t | z_1..z_t for t = 0..T-1.
struct FilteredPath {
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::MatrixXd> cov;
  int length() const { return static_cast<int>(mean.size()); }
};

struct SmoothedPath {
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::MatrixXd> cov;
};

/// Lower Cholesky factor of a symmetrized copy of `a`. Escalating diagonal jitter
/// is tried before FilterDivergence is thrown.
Eigen::MatrixXd safe_cholesky(const Eigen::MatrixXd& a, const char* what);

/// Covariance filter for x_t = F x_{t-1} + c_t + w_t, w ~ N(0, Qn), x_{-1} = 0,
/// observed as z_t = x_t + v_t with v_t ~ N(0, diag(r_t)).
/// offsets, z and r are m x T.
FilteredPath filter_identity_obs(const Eigen::MatrixXd& F, const Eigen::MatrixXd& offsets, const Eigen::MatrixXd& Qn,
                                 const Eigen::MatrixXd& z, const Eigen::MatrixXd& r);

/// Information filter for f_t = diag(phi) f_{t-1} + u_t, u ~ N(0, I), f_0 ~ N(0, I / h0),
/// observed as z_t = H f_t + e_t with e_t ~ N(0, obs_var I). z is N x T.
FilteredPath filter_factors(const Eigen::VectorXd& phi, double h0, const Eigen::MatrixXd& H, double obs_var,
                            const Eigen::MatrixXd& z);

/// Joint draw of the state path (m x T) given the filtered moments. offsets may be empty (zero).
Eigen::MatrixXd backward_sample(const FilteredPath& path, const Eigen::MatrixXd& F, const Eigen::MatrixXd& offsets,
                                const Eigen::MatrixXd& Qn, Rng& rng);

/// Rauch-Tung-Striebel smoothed moments for the same system.
SmoothedPath rts_smooth(const FilteredPath& path, const Eigen::MatrixXd& F, const Eigen::MatrixXd& offsets,
                        const Eigen::MatrixXd& Qn);

}  // namespace dsqp
