#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dsqp/gibbs.hpp"

namespace dsqp {

/// Log posterior odds log P(s_k = 1 | .) - log P(s_k = 0 | .).
double switch_log_odds(const GibbsEngine& engine, const SamplerState& s, int k);

/// Bernoulli draw of s_k given everything else; returns the new value.
int draw_switch(const GibbsEngine& engine, SamplerState& s, int k, Rng& rng);

/// Paths of inactive factors from their AR(1) prior: f_1 ~ N(0, 1/h_f), f_t = phi f_{t-1} + N(0, 1).
void draw_inactive_factors(const GibbsEngine& engine, SamplerState& s, Rng& rng);

/// Empirical distribution of sum_j s_j over a trace of switch vectors; length r_max + 1.
Eigen::VectorXd posterior_factor_count(const std::vector<Eigen::VectorXi>& trace, int r_max);

/// Same distribution from per-count tallies.
Eigen::VectorXd posterior_factor_count(const Eigen::VectorXd& count_tally);

}  // namespace dsqp
