import numpy as np
import pytest

from conftest import make_scalar
from mfsocial.grid import build_grid
from mfsocial.oracles import (OracleSubclassError, deterministic_qp, qp_gradient,
                              riccati_lq)
from mfsocial.scenario import derived_coefficients, empirical_mix


def test_riccati_zero_weights():
    sol = riccati_lq(0.5, 1.0, 0.0, 1.0, 0.0, 1.0, 0.01)
    assert np.allclose(sol.P, 0.0)
    assert np.allclose(sol.gains, 0.0)


def test_riccati_tanh_closed_form():
    sol = riccati_lq(0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0 / 400)
    assert sol.P[0, 0, 0] == pytest.approx(np.tanh(1.0), abs=1e-6)
    # terminal condition holds exactly
    assert sol.P[-1, 0, 0] == 0.0
    # closed form along the grid
    times = sol.grid_times
    assert np.allclose(sol.P[:, 0, 0], np.tanh(1.0 - times), atol=1e-6)


def test_riccati_residual_second_order_at_midpoints():
    h = 0.01
    sol = riccati_lq(0.3, 1.0, 1.0, 2.0, 0.5, 1.0, h)
    P = sol.P[:, 0, 0]
    # centered differences against the defining equation
    dP = (P[2:] - P[:-2]) / (2 * h)
    rhs = -(2 * 0.3 * P[1:-1] - P[1:-1] ** 2 / 2.0 + 1.0)
    assert np.max(np.abs(dP - rhs)) < 5 * h**2


def test_riccati_control_scale_invariance():
    a = riccati_lq(0.2, 1.0, 1.0, 1.0, 0.3, 1.0, 0.01)
    b = riccati_lq(0.2, 2.0, 1.0, 4.0, 0.3, 1.0, 0.01)
    assert np.allclose(a.P, b.P, atol=1e-12)
    xa, _ = a.simulate(np.array([[0.2]]), np.array([[1.0]]), [1.0], 0.01)
    xb, _ = b.simulate(np.array([[0.2]]), np.array([[2.0]]), [1.0], 0.01)
    assert np.allclose(xa, xb, atol=1e-12)


def _det_scenario(**kw):
    base = dict(a=0.3, a_lag=0.4, a_mix=0.3, b=1.0, b_lag=0.3, b_mix=0.2,
                d=0.0, d_lag=0.0, q=1.0, q_lag=0.4, s=0.3, s_lag=0.2,
                r=1.0, r_lag=0.3, g=0.5, gamma=0.4, T=1.0, delta=0.1, theta=0.1,
                xi_kind="point", xi_mean=1.0, xi_var=0.0, x0=1.0, u0=0.0)
    base.update(kw)
    return make_scalar(**base)


def test_qp_gradient_matches_finite_differences(rng):
    sc = _det_scenario()
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    dc = derived_coefficients(sc, grid)
    mix = empirical_mix(3, sc.pi)
    from mfsocial.oracles import _objective

    U = rng.standard_normal((3, grid.steps, 1))
    g = qp_gradient(dc, grid, mix, U)
    eps = 1e-6
    for _ in range(8):
        V = rng.standard_normal(U.shape)
        fd = (_objective(dc, grid, mix, U + eps * V)
              - _objective(dc, grid, mix, U - eps * V)) / (2 * eps)
        assert fd == pytest.approx(float(np.sum(g * V)), rel=1e-5, abs=1e-8)


def test_qp_zero_weights_zero_controls():
    sc = _det_scenario(q=0.0, q_lag=0.0, s=0.0, s_lag=0.0, g=0.0, gamma=0.0)
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    sol = deterministic_qp(sc, grid, 4)
    assert np.allclose(sol.controls, 0.0, atol=1e-10)
    assert sol.kkt_residual <= 1e-8


def test_qp_matches_riccati_on_common_subclass():
    sc = _det_scenario(a=0.2, a_lag=0.0, a_mix=0.0, b=1.0, b_lag=0.0, b_mix=0.0,
                       q=1.0, q_lag=0.0, s=0.0, s_lag=0.0, r=1.0, r_lag=0.0,
                       g=0.4, gamma=0.0, delta=0.0, theta=0.0)
    grid = build_grid(1.0, 1.0 / 200, 0.0, 0.0)
    qp = deterministic_qp(sc, grid, 1)
    ric = riccati_lq(0.2, 1.0, 1.0, 1.0, 0.4, 1.0, grid.h)
    _, ur = ric.simulate(np.array([[0.2]]), np.array([[1.0]]), [1.0], grid.h)
    rel = (np.linalg.norm(qp.controls[0, :, 0] - ur[: grid.steps, 0])
           / np.linalg.norm(ur[: grid.steps, 0]))
    assert rel < 10 * grid.h


def test_qp_symmetry_identical_agents():
    sc = _det_scenario()
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    sol = deterministic_qp(sc, grid, 2)
    assert np.allclose(sol.controls[0], sol.controls[1], atol=1e-8)


def test_qp_true_minimum_beats_probes(rng):
    sc = _det_scenario()
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    dc = derived_coefficients(sc, grid)
    mix = empirical_mix(3, sc.pi)
    from mfsocial.oracles import _objective

    sol = deterministic_qp(sc, grid, 3, mix)
    for _ in range(100):
        probe = sol.controls + rng.standard_normal(sol.controls.shape) * rng.uniform(0.01, 2.0)
        assert _objective(dc, grid, mix, probe) >= sol.objective - 1e-9


def test_qp_convexity_witness(rng):
    sc = _det_scenario()
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    dc = derived_coefficients(sc, grid)
    mix = empirical_mix(2, sc.pi)
    g0 = qp_gradient(dc, grid, mix, np.zeros((2, grid.steps, 1)))
    r_min = 1.0  # floor from the undelayed control weight
    for _ in range(100):
        v = rng.standard_normal((2, grid.steps, 1))
        hv = qp_gradient(dc, grid, mix, v) - g0
        rayleigh = float(np.sum(v * hv))
        assert rayleigh >= grid.h * r_min * float(np.sum(v * v)) - 1e-9


def test_qp_subclass_guards():
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    with pytest.raises(OracleSubclassError):
        deterministic_qp(_det_scenario(d=0.5), grid, 2)
    with pytest.raises(OracleSubclassError):
        deterministic_qp(_det_scenario(xi_kind="gaussian", xi_var=1.0), grid, 2)
