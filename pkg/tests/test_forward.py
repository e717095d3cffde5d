import numpy as np
import pytest

from conftest import make_scalar, make_two_type
from mfsocial.condexp import CondExpOperator
from mfsocial.forward import cc_forward, simulate_variation
from mfsocial.grid import NoiseEnsemble, PathEnsemble, build_grid
from mfsocial.population import rate_fit
from mfsocial.scenario import derived_coefficients, empirical_mix


def _run_forward(sc, grid, M=1, seed=0, zero_noise=True, p_list=None, q_list=None,
                 w=None, feats=None):
    dc = derived_coefficients(sc, grid)
    if zero_noise:
        noise = [NoiseEnsemble(grid=grid, seed=0, dW=np.zeros((M, grid.steps)))
                 for _ in range(sc.K)]
    else:
        noise = [NoiseEnsemble.build(grid, M, seed + k) for k in range(sc.K)]
    if w is None:
        w = np.zeros((grid.steps + 1, sc.n))
    ce = CondExpOperator()
    return cc_forward(dc, grid, p_list, q_list, w, noise, ce, feats)


def test_zero_coefficients_hold_initial_value():
    sc = make_scalar(a=0.0, b=0.0, xi_mean=2.5, x0=2.5)
    grid = build_grid(1.0, 0.1)
    fwd = _run_forward(sc, grid, M=3)
    assert np.allclose(fwd.x[0].body(), 2.5)


def test_scalar_euler_growth():
    a = 0.8
    grid = build_grid(1.0, 0.01)
    sc = make_scalar(a=a, b=0.0, xi_mean=1.0)
    fwd = _run_forward(sc, grid)
    expected = (1 + a * grid.h) ** grid.steps
    assert fwd.x[0].at(grid.steps)[0, 0] == pytest.approx(expected, rel=1e-12)
    assert fwd.x[0].at(grid.steps)[0, 0] == pytest.approx(np.exp(a), rel=3 * a * grid.h)


def test_method_of_steps_pure_state_delay():
    # xdot = x(t - 1/2) with unit pre-history: piecewise linear then quadratic
    grid = build_grid(1.0, 1.0 / 200.0, delta=0.5)
    sc = make_scalar(a=0.0, a_lag=1.0, b=0.0, xi_mean=1.0, x0=1.0, delta=0.5)
    fwd = _run_forward(sc, grid)
    assert fwd.x[0].at(grid.steps)[0, 0] == pytest.approx(2.125, abs=0.02)
    mid = fwd.x[0].at(grid.steps // 2)[0, 0]
    assert mid == pytest.approx(1.5, abs=0.01)


def test_forward_linearity_in_backward_inputs():
    sc = make_scalar(a=-0.5, b=1.0, b_lag=0.3, d=0.4, d_lag=0.1, delta=0.1,
                     theta=0.1, xi_mean=0.0, x0=0.0, u0=0.0)
    grid = build_grid(1.0, 0.05, 0.1, 0.1)
    rng = np.random.default_rng(0)
    M = 16
    feats = [PathEnsemble(grid, rng.standard_normal((M, grid.history_len + grid.steps + 1, 1)))]

    def bundle(scale):
        p = PathEnsemble.zeros(grid, M, 1)
        q = PathEnsemble.zeros(grid, M, 1)
        p.values[:] = scale * rng2.standard_normal(p.values.shape)
        q.values[:] = scale * rng2.standard_normal(q.values.shape)
        return [p], [q]

    rng2 = np.random.default_rng(1)
    p1, q1 = bundle(1.0)
    rng2 = np.random.default_rng(1)
    p2, q2 = bundle(2.0)
    w1 = np.random.default_rng(2).standard_normal((grid.steps + 1, 1))
    dc = derived_coefficients(sc, grid)
    noise = [NoiseEnsemble.build(grid, M, 3)]
    ce = CondExpOperator()
    out1 = cc_forward(dc, grid, p1, q1, w1, noise, ce, feats)
    out2 = cc_forward(dc, grid, p2, q2, 2.0 * w1, noise, ce, feats)
    # doubling the zero-offset input doubles the zero-offset response
    assert np.allclose(out2.x[0].values, 2.0 * out1.x[0].values, atol=1e-10)
    assert np.allclose(out2.v[0].values, 2.0 * out1.v[0].values, atol=1e-10)


def test_strong_convergence_order_one():
    a, T = 1.0, 1.0
    errs, hs = [], []
    for steps in (50, 100, 200):
        grid = build_grid(T, T / steps)
        sc = make_scalar(a=a, b=0.0, xi_mean=1.0)
        fwd = _run_forward(sc, grid)
        errs.append(abs(fwd.x[0].at(grid.steps)[0, 0] - np.exp(a)))
        hs.append(grid.h)
    fit = rate_fit(1.0 / np.asarray(hs), errs)
    assert fit.slope == pytest.approx(-1.0, abs=0.2)


# --- variation systems -------------------------------------------------------

def _variation(sc, grid, du, N=10, agent_type=0, R=1):
    dc = derived_coefficients(sc, grid)
    mix = empirical_mix(N, sc.pi)
    return simulate_variation(dc, grid, du, agent_type, mix, np.zeros((R, grid.steps)))


def test_zero_perturbation_zero_response():
    sc = make_two_type()
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    du = np.zeros((grid.steps + 1, 1))
    var = _variation(sc, grid, du)
    assert np.allclose(var.dx_i.values, 0.0)
    for k in range(2):
        assert np.allclose(var.dx_grp[k].values, 0.0)
        assert np.allclose(var.x_lim[k].values, 0.0)


def test_no_mixing_kills_limit_systems():
    sc = make_scalar(a=-1.0, a_mix=0.0, b_mix=0.0, b=1.0)
    grid = build_grid(1.0, 0.1)
    du = np.ones((grid.steps + 1, 1))
    var = _variation(sc, grid, du)
    assert np.allclose(var.x_lim[0].values, 0.0)
    assert np.allclose(var.dx_grp[0].values, 0.0)


def test_limit_aggregate_integrates_control_mix():
    # with only the population control gain active the limit response is t
    sc = make_scalar(a=0.0, a_lag=0.0, a_mix=0.0, b=0.0, b_mix=1.0, x0=0.0, u0=0.0)
    grid = build_grid(1.0, 0.01)
    du = np.ones((grid.steps + 1, 1))
    var = _variation(sc, grid, du)
    times = grid.times()
    got = var.x_lim[0].body()[0, :, 0]
    assert np.allclose(got, times, atol=1e-9)


def test_peer_response_scales_inverse_square_in_population():
    sc = make_two_type(d=0.0, d_lag=0.0)
    grid = build_grid(1.0, 0.05, 0.1, 0.1)
    du = np.ones((grid.steps + 1, 1))
    sups = []
    Ns = [10, 100, 1000]
    for N in Ns:
        var = _variation(sc, grid, du, N=N)
        peer = np.stack([var.dx_peer(1, i)[0] for i in range(grid.steps + 1)])
        sups.append(float(np.max(np.sum(peer**2, axis=1))))
    fit = rate_fit(Ns, sups)
    assert fit.slope == pytest.approx(-2.0, abs=0.3)
