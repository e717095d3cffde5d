import numpy as np
import pytest

from conftest import make_scalar, reference_certified_doc, scalar_doc
from mfsocial.ccfix import (PicardOptions, SubclassError, auxiliary_cost, cc_residual,
                            decentralized_control, mean_system_solve, picard_solve)
from mfsocial.forward import _ap
from mfsocial.grid import PathEnsemble, build_grid, discounted_norm
from mfsocial.oracles import riccati_lq
from mfsocial.scenario import derived_coefficients, scenario_from_dict
from mfsocial.wellposedness import certify


def grid_for(sc, steps):
    return build_grid(sc.T, sc.T / steps, sc.delta, sc.theta)


def test_zero_weights_fixed_point_immediately():
    sc = make_scalar(q=0.0, q_lag=0.0, g=0.0, s=0.0, s_lag=0.0, b=1.0, r=1.0)
    grid = grid_for(sc, 20)
    opts = PicardOptions(M=8, tol=1e-12, seed=1)
    cc = picard_solve(sc, grid, opts)
    assert len(cc.residuals) <= 2
    for k in range(sc.K):
        assert np.allclose(cc.p[k].body(), 0.0)
        assert np.allclose(cc.q[k].body(), 0.0)
        assert np.allclose(cc.v[k].body(), 0.0)


def test_decoupled_no_delay_matches_riccati_oracle():
    # effective weights q+q_lag = 1, r+r_lag = 1 with zero delays
    sc = make_scalar(a=0.0, b=1.0, q=0.7, q_lag=0.3, r=0.6, r_lag=0.4, g=0.0,
                     xi_mean=1.0, x0=1.0)
    grid = grid_for(sc, 100)
    cc = mean_system_solve(sc, grid, PicardOptions(tol=1e-12, max_iters=100))
    ric = riccati_lq(0.0, 1.0, 1.0, 1.0, 0.0, sc.T, grid.h)
    assert ric.P[0, 0, 0] == pytest.approx(np.tanh(1.0), abs=5e-3)
    xr, ur = ric.simulate(np.zeros((1, 1)), np.ones((1, 1)), [1.0], grid.h)
    hl = grid.history_len
    u_cc = cc.uhat[hl: hl + grid.steps, 0]
    u_or = ur[: grid.steps, 0]
    rel = np.linalg.norm(u_cc - u_or) / np.linalg.norm(u_or)
    assert rel < 0.02, f"relative control gap {rel:.3%}"


def test_picard_agrees_with_mean_solve_on_deterministic_scenario():
    doc = reference_certified_doc()
    doc["dynamics"]["D"] = 0.0
    doc["dynamics"]["D_lag"] = 0.0
    sc = scenario_from_dict(doc)
    grid = grid_for(sc, 50)
    det = mean_system_solve(sc, grid, PicardOptions(tol=1e-12, max_iters=100))
    cc = picard_solve(sc, grid, PicardOptions(M=4000, tol=1e-10, seed=3, max_iters=100))
    hl = grid.history_len
    gap = np.max(np.abs(cc.xhat[hl:] - det.xhat[hl:]))
    assert gap < 3.0 / np.sqrt(4000) + 5 * grid.h**2


def test_reference_residuals_decay_geometrically(ref_certified):
    grid = grid_for(ref_certified, 50)
    cert = certify(ref_certified, grid)
    assert cert.passed
    opts = PicardOptions(M=500, tol=1e-10, seed=11, rho=cert.rho)
    cc = picard_solve(ref_certified, grid, opts)
    r = cc.residuals
    ratios = [r[i + 1] / r[i] for i in range(1, len(r) - 1) if r[i] > 10 * opts.tol]
    assert ratios, "expected at least one measurable contraction step"
    assert max(ratios) < 0.9
    assert max(ratios) <= cert.modulus + 0.1
    # non-increasing after burn-in
    assert all(r[i + 1] <= r[i] * 1.0 + 1e-15 for i in range(1, len(r) - 1))


def test_fixed_point_independent_of_initialization(ref_certified):
    grid = grid_for(ref_certified, 20)
    tol = 1e-8
    a = picard_solve(ref_certified, grid, PicardOptions(M=200, tol=tol, seed=5, init="zeros"))
    b = picard_solve(ref_certified, grid, PicardOptions(M=200, tol=tol, seed=5, init="random"))
    hl = grid.history_len
    assert np.max(np.abs(a.xhat[hl:] - b.xhat[hl:])) <= 5 * tol


def test_cc_residual_detects_staleness(ref_certified):
    grid = grid_for(ref_certified, 20)
    opts = PicardOptions(M=200, tol=1e-9, seed=7)
    cc = picard_solve(ref_certified, grid, opts)
    res = cc_residual(cc, ref_certified, grid)
    assert res["total"] <= 5 * opts.tol
    assert res["mean_defect"] <= 1e-8
    for k in range(ref_certified.K):
        cc.p[k].values += 1.0
    res2 = cc_residual(cc, ref_certified, grid)
    assert res2["total"] > 0.1


def test_zeta_components_have_zero_cross_path_variance(ref_certified):
    grid = grid_for(ref_certified, 20)
    cc = picard_solve(ref_certified, grid, PicardOptions(M=100, tol=1e-8, seed=9))
    # the mean-correction adjoint is a plain grid, identical for every path
    for z in cc.zeta:
        assert z.shape == (grid.steps + 1, ref_certified.n)


def test_decentralized_control_formula():
    sc = make_scalar(b=1.0, r=2.0, r_lag=0.0, theta=0.0)
    grid = grid_for(sc, 10)
    dc = derived_coefficients(sc, grid)
    cc = picard_solve(sc, grid, PicardOptions(M=4, tol=1e-10, seed=1))
    u = decentralized_control(dc, 0, 0, [1.0], [0.0], [0.0], [0.0], cc)
    # direct formula: -R_eff^{-1} B' p with the population correction at zero
    corr = float((dc.b_mix.at(0).T @ cc.w[0])[0])
    assert u[0] == pytest.approx(-0.5 - 0.5 * corr, abs=1e-12)


def test_control_mask_kills_advanced_inputs():
    sc = make_scalar(b=1.0, b_lag=1.0, d_lag=1.0, r=1.0, theta=0.5, u0=0.0)
    grid = grid_for(sc, 10)
    dc = derived_coefficients(sc, grid)
    cc = picard_solve(sc, grid, PicardOptions(M=4, tol=1e-8, seed=2))
    i_late = grid.steps - 1  # t > T - theta
    u_a = decentralized_control(dc, 0, i_late, [1.0], [123.0], [0.0], [-7.0], cc)
    u_b = decentralized_control(dc, 0, i_late, [1.0], [0.0], [0.0], [0.0], cc)
    assert u_a[0] == pytest.approx(u_b[0], abs=1e-14)


def test_mean_solve_guards_subclass():
    sc = make_scalar(d=0.5)
    grid = grid_for(sc, 10)
    with pytest.raises(SubclassError):
        mean_system_solve(sc, grid)


def test_auxiliary_cost_stationary_at_solution(ref_certified):
    from mfsocial.grid import NoiseEnsemble
    from mfsocial.ccfix import type_seed, _draw_xi
    from mfsocial.forward import cc_forward
    from mfsocial.condexp import CondExpOperator

    sc = ref_certified
    grid = grid_for(sc, 50)
    opts = PicardOptions(M=2000, tol=1e-10, seed=13)
    cc = picard_solve(sc, grid, opts)
    dc = derived_coefficients(sc, grid)
    noise = NoiseEnsemble.build(grid, opts.M, type_seed(opts.seed, 0))
    xi = _draw_xi(sc, opts.M, opts.seed)[0]

    def integrate(uvals):
        """Auxiliary state under a given control ensemble at frozen grids."""
        S, h, md, mt, hl = grid.steps, grid.h, grid.m_delta, grid.m_theta, grid.history_len
        x = PathEnsemble.zeros(grid, opts.M, sc.n)
        x.set_history(dc.x0_hist)
        x.set(0, xi)
        u = PathEnsemble(grid, uvals, kind="control")
        for i in range(S):
            drift = (_ap(dc.a[0].at(i), x.at(i)) + _ap(dc.a_lag[0].at(i), x.at(i - md))
                     + (dc.a_mix.at(i) @ cc.xhat[hl + i - md])[None, :]
                     + _ap(dc.b.at(i), u.at(i)) + _ap(dc.b_lag.at(i), u.at(i - mt))
                     + (dc.b_mix.at(i) @ cc.uhat[hl + i - mt])[None, :])
            diff = _ap(dc.d_g.at(i), u.at(i)) + _ap(dc.d_lag.at(i), u.at(i - mt))
            x.set(i + 1, x.at(i) + h * drift + diff * noise.dW[:, i : i + 1])
        return x, u

    base_vals = cc.v[0].values.copy()
    rng = np.random.default_rng(99)
    s = 1e-3
    fds = []
    for _ in range(20):
        du = np.zeros_like(base_vals)
        du[:, grid.history_len:, :] = rng.standard_normal((1, grid.steps + 1, sc.d))
        du[:, -1, :] = 0.0
        xp, up = integrate(base_vals + s * du)
        xm, um = integrate(base_vals - s * du)
        ju = auxiliary_cost(dc, grid, cc, xp, up)
        jd = auxiliary_cost(dc, grid, cc, xm, um)
        fds.append((ju - jd) / (2 * s))
    # sampling error of the cost gradient decays like 1/sqrt(M), the
    # discrete-adjoint mismatch like h (both verified by refinement)
    tol = 0.02 / np.sqrt(opts.M) + 0.01 * grid.h
    assert np.max(np.abs(fds)) < tol, (np.max(np.abs(fds)), tol)
