"""Backward solvers: anticipated BSDEs by regression, advanced ODEs by sweep.

The generic primitive integrates a linear backward equation whose driver
reads the solution itself, its conditional expectation one state-delay ahead
(available inside a backward sweep since later indices are already solved),
and an exogenous forcing.  Conditional expectations are cross-sectional
regressions on adapted state features; the martingale part is extracted from
the regression of increment-weighted future values.

The deterministic advanced system (the mean-correction adjoint) is a coupled
K-type linear ODE stepped backward with direct advanced reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .condexp import CondExpOperator
from .forward import DivergenceError, _ap, state_features
from .grid import NoiseEnsemble, PathEnsemble, TimeGrid, tree_mean
from .scenario import DerivedCoeffs

__all__ = [
    "AbsdeResult",
    "solve_linear_absde",
    "solve_deterministic_advanced",
    "BackwardBundle",
    "cc_backward",
]


@dataclass
class AbsdeResult:
    y: PathEnsemble
    z: PathEnsemble
    y_adv_ce: PathEnsemble  # E_t[Y(t + delta)] values, zero outside the window
    r2: np.ndarray  # per-step fit quality of the one-step projection
    cond: np.ndarray


def solve_linear_absde(grid: TimeGrid, noise: NoiseEnsemble, terminal: np.ndarray,
                       own_mat, adv_mat, forcing, feats, ce: CondExpOperator,
                       with_z: bool = True) -> AbsdeResult:
    """Backward sweep for dY = -[own(t)Y + adv(t)E_t[Y(t+delta)] 1 + f(t)]dt + Z dW.

    ``own_mat(i)``/``adv_mat(i)`` return the matrices applied to column
    vectors; ``forcing(i)`` returns (M, n) or (n,); ``feats(i)`` returns the
    (M, F) regression features at step i, or None for mean projection.
    """
    S, h, md = grid.steps, grid.h, grid.m_delta
    M = noise.M
    n = np.atleast_2d(terminal).shape[-1]

    y = PathEnsemble.zeros(grid, M, n, kind="backward-Y")
    z = PathEnsemble.zeros(grid, M, n, kind="backward-Z")
    adv = PathEnsemble.zeros(grid, M, n, kind="backward-Y")
    y.set(S, terminal)
    r2 = np.ones(S)
    cond = np.ones(S)

    for i in range(S - 1, -1, -1):
        f = feats(i)
        y_next = y.at(i + 1)
        if f is None:
            y_ce = np.tile(tree_mean(y_next, axis=0), (M, 1))
            z_i = np.zeros((M, n))
            y_adv = (np.tile(tree_mean(y.at(i + md), axis=0), (M, 1))
                     if i + md <= S else np.zeros((M, n)))
        else:
            fit = ce.fit(f, y_next)
            y_ce = fit.predict(f)
            r2[i], cond[i] = fit.r2, fit.cond
            if with_z:
                # increment-weighted projection of the residual: unbiased for
                # the martingale part, exactly zero for deterministic targets
                z_i = ce.fit(f, (y_next - y_ce) * noise.dW[:, i : i + 1]).predict(f) / h
            else:
                z_i = np.zeros((M, n))
            if i + md > S:
                y_adv = np.zeros((M, n))
            elif md == 0:
                y_adv = y_ce
            else:
                y_adv = ce.fit(f, y.at(i + md)).predict(f)
        if with_z:
            z.set(i, z_i)
        masked_on = i + md <= S
        if masked_on:
            adv.set(i, y_adv)
        fo = forcing(i)
        drift = _ap(own_mat(i), y_ce) + fo
        if masked_on:
            drift = drift + _ap(adv_mat(i), y_adv)
        nxt = y_ce + h * drift
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(i, "backward state")
        y.set(i, nxt)

    return AbsdeResult(y=y, z=z, y_adv_ce=adv, r2=r2, cond=cond)


def solve_deterministic_advanced(dc: DerivedCoeffs, grid: TimeGrid,
                                 yhat: list, xhat_body: np.ndarray,
                                 terminals: list) -> list:
    """Coupled K-type advanced ODE for the deterministic mean-correction adjoint.

    Backward explicit sweep; advanced values are read directly from already
    computed later indices, masked off beyond the advanced window.  ``yhat``
    supplies the peer-adjoint mean grids, ``xhat_body`` the population mean
    state on [0, T].
    """
    sc = dc.sc
    K, n = sc.K, sc.n
    S, h, md = grid.steps, grid.h, grid.m_delta
    zeta = [np.zeros((S + 1, n)) for _ in range(K)]
    for k in range(K):
        zeta[k][S] = terminals[k]
    for i in range(S - 1, -1, -1):
        on = i + md <= S
        if on:
            coup = np.zeros(n)
            amix_adv_T = dc.a_mix.at(i + md).T
            for l in range(K):
                coup += sc.pi[l] * (amix_adv_T @ (yhat[l][i + md] + zeta[l][i + md]))
        for k in range(K):
            drift = dc.a[k].at(i).T @ zeta[k][i + 1] - dc.s_cross.at(i) @ xhat_body[i]
            if on:
                drift = drift + dc.a_lag[k].at(i + md).T @ zeta[k][i + md] + coup
            zeta[k][i] = zeta[k][i + 1] + h * drift
    return zeta


@dataclass
class BackwardBundle:
    """Backward half of the fixed-point iterate for all K types."""

    p: list  # adjoint ensembles
    q: list  # adjoint martingale parts
    ysoc: list  # peer-adjoint ensembles
    zsoc: list
    zeta: list  # deterministic mean-correction grids (S+1, n)
    yhat: list  # means of ysoc on [0, T]
    w: np.ndarray  # sum_k pi_k (yhat_k + zeta_k), the population correction
    r2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cond: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def zero(cls, grid: TimeGrid, K: int, n: int, M: int) -> "BackwardBundle":
        mk = lambda kind: [PathEnsemble.zeros(grid, M, n, kind=kind) for _ in range(K)]
        return cls(p=mk("backward-Y"), q=mk("backward-Z"), ysoc=mk("backward-Y"),
                   zsoc=mk("backward-Z"), zeta=[np.zeros((grid.steps + 1, n)) for _ in range(K)],
                   yhat=[np.zeros((grid.steps + 1, n)) for _ in range(K)],
                   w=np.zeros((grid.steps + 1, n)))


def cc_backward(dc: DerivedCoeffs, grid: TimeGrid, x_list: list, xhat: np.ndarray,
                noise: list, ce: CondExpOperator) -> BackwardBundle:
    """Backward half-sweep of the fixed-point map given forward states.

    Order respects the one-way coupling: peer adjoints first (their means
    feed everything else), then the deterministic mean correction, then the
    per-type adjoints.
    """
    sc = dc.sc
    K, n = sc.K, sc.n
    S, hl, md = grid.steps, grid.history_len, grid.m_delta
    xhat_body = xhat[hl:]
    xbar_T = sum(sc.pi[k] * tree_mean(x_list[k].at(S), axis=0) for k in range(K))

    ysoc, zsoc, yhat = [], [], []
    r2_rows, cond_rows = [], []
    for k in range(K):
        res = solve_linear_absde(
            grid, noise[k],
            terminal=_ap(sc.g, x_list[k].at(S)),
            own_mat=lambda i, k=k: dc.a[k].at(i).T,
            adv_mat=lambda i, k=k: dc.a_lag[k].at(i + md).T,
            forcing=lambda i, k=k: _ap(dc.q_eff.at(i), x_list[k].at(i)),
            feats=lambda i, k=k: state_features(x_list[k], i),
            ce=ce,
        )
        ysoc.append(res.y)
        zsoc.append(res.z)
        yhat.append(tree_mean(res.y.body(), axis=0))
        r2_rows.append(res.r2)
        cond_rows.append(res.cond)

    zeta = solve_deterministic_advanced(
        dc, grid, yhat, xhat_body,
        terminals=[-dc.g_cross @ xbar_T for _ in range(K)],
    )

    # deterministic part of the adjoint driver: -S_cross xhat + advanced coupling
    coup = np.zeros((S + 1, n))
    for i in range(S):
        if i + md <= S:
            amix_adv_T = dc.a_mix.at(i + md).T
            for l in range(K):
                coup[i] += sc.pi[l] * (amix_adv_T @ (yhat[l][i + md] + zeta[l][i + md]))

    p, q = [], []
    for k in range(K):
        res = solve_linear_absde(
            grid, noise[k],
            terminal=_ap(sc.g, x_list[k].at(S)) - (dc.g_cross @ xbar_T)[None, :],
            own_mat=lambda i, k=k: dc.a[k].at(i).T,
            adv_mat=lambda i, k=k: dc.a_lag[k].at(i + md).T,
            forcing=lambda i, k=k: (_ap(dc.q_eff.at(i), x_list[k].at(i))
                                    - (dc.s_cross.at(i) @ xhat_body[i])[None, :]
                                    + coup[i][None, :]),
            feats=lambda i, k=k: state_features(x_list[k], i),
            ce=ce,
        )
        p.append(res.y)
        q.append(res.z)
        r2_rows.append(res.r2)
        cond_rows.append(res.cond)

    w = np.zeros((S + 1, n))
    for k in range(K):
        w += sc.pi[k] * (yhat[k] + zeta[k])

    return BackwardBundle(p=p, q=q, ysoc=ysoc, zsoc=zsoc, zeta=zeta, yhat=yhat, w=w,
                          r2=np.vstack(r2_rows), cond=np.vstack(cond_rows))
