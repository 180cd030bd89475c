import numpy as np
import pytest

import dsqp


def ring(n):
    w = np.zeros((n, n))
    for i in range(n):
        w[i, (i + 1) % n] = 0.5
        w[i, (i - 1) % n] = 0.5
    return dsqp.SpatialWeights(w, row_normalized=True)


def test_weights_blocks_and_normalization():
    w = dsqp.clustered_weights(40, 4, 9, 1, 3)
    assert w.n == 40
    assert sum(len(b) for b in w.blocks) == 40
    assert w.max_row_sum_deviation() < 1e-12
    raw = dsqp.SpatialWeights(np.array([[0, 2.0, 0], [1, 0, 3], [0, 0, 0]]))
    assert raw.n_blocks == 1
    normed = raw.normalize_rows().to_dense()
    np.testing.assert_allclose(normed.sum(axis=1), [1, 1, 0])


def test_diagonal_stationarity():
    w = dsqp.SpatialWeights(np.zeros((3, 3)))
    r = dsqp.check_stationarity(np.zeros(3), np.zeros(3), np.array([0.9, 0.5, -0.3]), w)
    assert r["spectral_radius"] == pytest.approx(0.9, rel=1e-7)
    assert r["stationary"]


def test_solver_matches_numpy():
    w = ring(7)
    rho = np.linspace(-0.6, 0.7, 7)
    m = np.eye(7) - np.diag(rho) @ w.to_dense()
    assert dsqp.log_det(rho, w) == pytest.approx(np.linalg.slogdet(m)[1], rel=1e-10)
    rhs = np.arange(14.0).reshape(7, 2)
    np.testing.assert_allclose(dsqp.solve_system(rho, w, rhs), np.linalg.solve(m, rhs), atol=1e-10)


def test_quantile_loss():
    y = np.array([[1.0, -1.0]])
    assert dsqp.quantile_loss(y, np.zeros((1, 2)), 0.25) == pytest.approx((0.25 + 0.75) / 2)


def test_simulate_and_sample():
    w = dsqp.clustered_weights(8, 3, 5, 1, 2)
    sim = dsqp.simulate(w, n_units=8, n_periods=12, n_factors=1, seed=4)
    assert sim["y"].shape == (8, 12)
    assert len(sim["x"]) == 2
    assert len(sim["truth"]["rho_level"]) == 8
    out = dsqp.sample(sim["y"], sim["x"], w, 0.5, sampler={"n_sweeps": 30, "n_burnin": 20, "r_max": 2, "seed": 3},
                      enable_is=True)
    assert out["mean"]["rho"].shape == (8, 1)
    assert out["mean"]["lambda_rotated"].shape == (8, 2)
    assert out["factor_count"].sum() == pytest.approx(1.0)
    d = out["diagnostics"]
    assert d["retained_draws"] == 30
    assert d["tracked_values"] == dsqp.tracked_values(8, 12, 2, 2) == 3 * 8 + 8 * 2 + 2 * (12 + 8)
    assert 0 < out["ess"] <= 30
    again = dsqp.sample(sim["y"], sim["x"], w, 0.5, sampler={"n_sweeps": 30, "n_burnin": 20, "r_max": 2, "seed": 3})
    np.testing.assert_array_equal(again["mean"]["b"], out["mean"]["b"])


def test_errors_map_to_python():
    w = dsqp.SpatialWeights(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        dsqp.sample(np.zeros((2, 3)), [np.ones((2, 3))], w, 1.5)
    with pytest.raises(ValueError):
        dsqp.sample(np.zeros((2, 3)), [np.ones((2, 3))], w, 0.5, sampler={"n_sweeps": -1})
