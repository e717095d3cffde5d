"""Fixed-point solver for the consistency-condition system.

Alternates the forward and backward half-sweeps on a fixed noise pool until
the backward iterate stops moving in the discounted norm.  Common random
numbers across iterations make the map deterministic, so the residual log
measures contraction rather than Monte Carlo jitter.

The converged solution carries frozen population-mean grids, the
representative ensembles, and per-step affine feedback tables (fitted
regressions) that let any fresh agent evaluate the decentralized strategy
from its own state alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .backward import BackwardBundle, cc_backward
from .condexp import CondExpOperator, FittedMap
from .forward import ForwardResult, cc_forward, control_values, state_features
from .grid import (NoiseEnsemble, PathEnsemble, TimeGrid, discounted_norm_sq,
                   tree_mean)
from .scenario import DerivedCoeffs, Scenario, derived_coefficients, scenario_hash

log = logging.getLogger(__name__)

__all__ = [
    "PicardOptions",
    "PicardDivergenceError",
    "SubclassError",
    "PolicyTables",
    "CCSolution",
    "picard_solve",
    "mean_system_solve",
    "cc_residual",
    "decentralized_control",
    "auxiliary_cost",
]


class PicardDivergenceError(RuntimeError):
    """No convergence within the iteration budget; carries the residual log."""

    def __init__(self, residuals):
        super().__init__(f"no convergence after {len(residuals)} iterations "
                         f"(last residual {residuals[-1]:.3e})")
        self.residuals = list(residuals)


class SubclassError(ValueError):
    """Operation called outside its supported coefficient subclass."""


@dataclass
class PicardOptions:
    M: int = 2000
    max_iters: int = 60
    tol: float = 1e-9
    rho: float = 0.0  # discount used in the residual norm
    damping: float = 1.0
    seed: int = 0
    degree: int = 1
    ridge: float = 1e-10
    init: str = "zeros"  # or "random"

    def __post_init__(self):
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


def type_seed(seed: int, k: int) -> int:
    return int((np.uint64(seed) * np.uint64(0x100000001B3) + np.uint64(k + 1) * np.uint64(0x9E3779B1))
               & np.uint64(0xFFFFFFFFFFFFFFFF))


@dataclass
class PolicyTables:
    """Per-step affine feedback maps from own-state features to adjoints."""

    p: list  # [K][steps] FittedMap
    q: list
    p_adv: list  # projections of the adjoint one control-delay ahead (None off-window)
    q_adv: list
    degree: int
    ridge: float


@dataclass
class CCSolution:
    sc_hash: str
    grid: TimeGrid
    opts: PicardOptions
    xhat: np.ndarray  # (history_len + steps + 1, n)
    uhat: np.ndarray  # (history_len + steps + 1, d)
    yhat: list        # per type (steps+1, n)
    zeta: list
    w: np.ndarray     # (steps+1, n)
    x: list           # representative ensembles
    v: list
    p: list
    q: list
    ysoc: list
    zsoc: list
    policy: PolicyTables
    residuals: list
    deterministic: bool = False

    @property
    def xhat_body(self) -> np.ndarray:
        return self.xhat[self.grid.history_len:]

    @property
    def uhat_body(self) -> np.ndarray:
        return self.uhat[self.grid.history_len:]

    def consistency_defect(self, sc: Scenario) -> float:
        """L2 gap between the frozen mean state and the ensemble average."""
        mix_mean = sum(sc.pi[k] * tree_mean(self.x[k].body(), axis=0) for k in range(sc.K))
        return float(np.sqrt(discounted_norm_sq(mix_mean[None, :, :] - self.xhat_body[None, :, :],
                                                0.0, self.grid)))


def _residual(old: BackwardBundle, new: BackwardBundle, rho: float, grid: TimeGrid) -> tuple:
    y_sq = 0.0
    z_sq = 0.0
    for k in range(len(old.p)):
        y_sq += discounted_norm_sq(PathEnsemble(grid, new.p[k].values - old.p[k].values), rho)
        y_sq += discounted_norm_sq(PathEnsemble(grid, new.ysoc[k].values - old.ysoc[k].values), rho)
        y_sq += discounted_norm_sq(new.zeta[k] - old.zeta[k], rho, grid)
        z_sq += discounted_norm_sq(PathEnsemble(grid, new.q[k].values - old.q[k].values), rho)
        z_sq += discounted_norm_sq(PathEnsemble(grid, new.zsoc[k].values - old.zsoc[k].values), rho)
    return float(np.sqrt(y_sq)), float(np.sqrt(z_sq))


def _damp(old: BackwardBundle, new: BackwardBundle, lam: float, grid: TimeGrid,
          pi: np.ndarray) -> BackwardBundle:
    if lam >= 1.0:
        return new
    mix = lambda a, b: PathEnsemble(grid, (1 - lam) * a.values + lam * b.values, a.kind)
    K = len(old.p)
    p = [mix(old.p[k], new.p[k]) for k in range(K)]
    q = [mix(old.q[k], new.q[k]) for k in range(K)]
    ysoc = [mix(old.ysoc[k], new.ysoc[k]) for k in range(K)]
    zsoc = [mix(old.zsoc[k], new.zsoc[k]) for k in range(K)]
    zeta = [(1 - lam) * old.zeta[k] + lam * new.zeta[k] for k in range(K)]
    yhat = [tree_mean(ysoc[k].body(), axis=0) for k in range(K)]
    w = sum(pi[k] * (yhat[k] + zeta[k]) for k in range(K))
    return BackwardBundle(p=p, q=q, ysoc=ysoc, zsoc=zsoc, zeta=zeta, yhat=yhat, w=w,
                          r2=new.r2, cond=new.cond)


def _draw_xi(sc: Scenario, M: int, seed: int) -> list:
    draws = []
    for k in range(sc.K):
        rng = np.random.Generator(np.random.Philox(key=type_seed(seed, k) ^ 0xA5A5A5A5))
        draws.append(sc.xi[k].sample(rng, M))
    return draws


def fit_policy_tables(dc: DerivedCoeffs, grid: TimeGrid, fwd: ForwardResult,
                      bwd: BackwardBundle, ce: CondExpOperator) -> PolicyTables:
    """Freeze the converged adjoints as per-step affine feedbacks in own state."""
    sc = dc.sc
    S, mt = grid.steps, grid.m_theta
    mask_t = dc.mask_theta
    P, Q, PA, QA = [], [], [], []
    for k in range(sc.K):
        pk, qk, pak, qak = [], [], [], []
        for i in range(S):
            feats = state_features(fwd.x[k], i)
            pk.append(ce.fit(feats, bwd.p[k].at(i)))
            qk.append(ce.fit(feats, bwd.q[k].at(i)))
            if mask_t[i]:
                pak.append(ce.fit(feats, bwd.p[k].at(i + mt)))
                qak.append(ce.fit(feats, bwd.q[k].at(i + mt)))
            else:
                pak.append(None)
                qak.append(None)
        P.append(pk)
        Q.append(qk)
        PA.append(pak)
        QA.append(qak)
    return PolicyTables(p=P, q=Q, p_adv=PA, q_adv=QA, degree=ce.degree, ridge=ce.ridge)


def picard_solve(sc: Scenario, grid: TimeGrid, opts: PicardOptions,
                 ce: CondExpOperator | None = None,
                 noise: list | None = None,
                 xi_draws: list | None = None) -> CCSolution:
    """Iterate the composed forward/backward map to its fixed point.

    Starts from a zero backward state (or a seeded random one), applies
    forward then backward on a fixed noise pool, damps, and stops when the
    discounted-norm displacement falls below ``opts.tol``.  Raises
    ``PicardDivergenceError`` with the residual history if the budget runs
    out.
    """
    dc = derived_coefficients(sc, grid)
    ce = ce or CondExpOperator(degree=opts.degree, ridge=opts.ridge)
    if noise is None:
        noise = [NoiseEnsemble.build(grid, opts.M, type_seed(opts.seed, k)) for k in range(sc.K)]
    if xi_draws is None:
        xi_draws = _draw_xi(sc, opts.M, opts.seed)

    bwd = BackwardBundle.zero(grid, sc.K, sc.n, opts.M)
    if opts.init == "random":
        rng = np.random.Generator(np.random.Philox(key=opts.seed ^ 0x5EED))
        for k in range(sc.K):
            bwd.p[k].values += rng.standard_normal(bwd.p[k].values.shape)
            bwd.q[k].values += rng.standard_normal(bwd.q[k].values.shape)

    feats_src = None
    residuals = []
    fwd = None
    for it in range(1, opts.max_iters + 1):
        fwd = cc_forward(dc, grid, bwd.p, bwd.q, bwd.w, noise, ce, feats_src, xi_draws)
        new_bwd = cc_backward(dc, grid, fwd.x, fwd.xhat, noise, ce)
        ry, rz = _residual(bwd, new_bwd, opts.rho, grid)
        residuals.append(ry + rz)
        log.debug("picard iteration %d residual %.3e", it, residuals[-1])
        bwd = _damp(bwd, new_bwd, opts.damping, grid, sc.pi)
        feats_src = fwd.x
        if residuals[-1] <= opts.tol:
            break
    else:
        raise PicardDivergenceError(residuals)

    fwd = cc_forward(dc, grid, bwd.p, bwd.q, bwd.w, noise, ce, feats_src, xi_draws)
    policy = fit_policy_tables(dc, grid, fwd, bwd, ce)
    return CCSolution(
        sc_hash=scenario_hash(sc), grid=grid, opts=opts,
        xhat=fwd.xhat, uhat=fwd.uhat, yhat=bwd.yhat, zeta=bwd.zeta, w=bwd.w,
        x=fwd.x, v=fwd.v, p=bwd.p, q=bwd.q, ysoc=bwd.ysoc, zsoc=bwd.zsoc,
        policy=policy, residuals=residuals,
    )


def mean_system_solve(sc: Scenario, grid: TimeGrid, opts: PicardOptions | None = None) -> CCSolution:
    """Deterministic fixed point of the mean system (no Monte Carlo).

    Valid on the subclass without control-dependent noise, where the mean
    dynamics close among themselves; runs the same machinery on a single
    noiseless path started at the type means, which reproduces the mean
    recursion exactly.
    """
    if np.abs(sc.d_g.values).max() > 0 or np.abs(sc.d_lag.values).max() > 0:
        raise SubclassError("mean system requires zero control-noise gains")
    opts = opts or PicardOptions()
    dopts = PicardOptions(M=1, max_iters=opts.max_iters, tol=opts.tol, rho=opts.rho,
                          damping=opts.damping, seed=opts.seed, degree=opts.degree,
                          ridge=opts.ridge)
    noise = [NoiseEnsemble(grid=grid, seed=0, dW=np.zeros((1, grid.steps))) for _ in range(sc.K)]
    xi = [np.tile(sc.xi[k].mean, (1, 1)) for k in range(sc.K)]
    sol = picard_solve(sc, grid, dopts, noise=noise, xi_draws=xi)
    sol.deterministic = True
    return sol


def cc_residual(cc: CCSolution, sc: Scenario, grid: TimeGrid,
                ce: CondExpOperator | None = None) -> dict:
    """One more application of the map: displacement norms and the mean defect."""
    dc = derived_coefficients(sc, grid)
    ce = ce or CondExpOperator(degree=cc.opts.degree, ridge=cc.opts.ridge)
    if cc.deterministic:
        noise = [NoiseEnsemble(grid=grid, seed=0, dW=np.zeros((1, grid.steps))) for _ in range(sc.K)]
        xi = [np.tile(sc.xi[k].mean, (1, 1)) for k in range(sc.K)]
    else:
        noise = [NoiseEnsemble.build(grid, cc.opts.M, type_seed(cc.opts.seed, k)) for k in range(sc.K)]
        xi = _draw_xi(sc, cc.opts.M, cc.opts.seed)
    bwd = BackwardBundle(p=cc.p, q=cc.q, ysoc=cc.ysoc, zsoc=cc.zsoc, zeta=cc.zeta,
                         yhat=cc.yhat, w=cc.w)
    fwd = cc_forward(dc, grid, bwd.p, bwd.q, bwd.w, noise, ce, cc.x, xi)
    new_bwd = cc_backward(dc, grid, fwd.x, fwd.xhat, noise, ce)
    ry, rz = _residual(bwd, new_bwd, cc.opts.rho, grid)
    return {"dy": ry, "dz": rz, "total": ry + rz, "mean_defect": cc.consistency_defect(sc)}


def decentralized_control(dc: DerivedCoeffs, k: int, i: int,
                          p_now, p_adv_ce, q_now, q_adv_ce, cc: CCSolution) -> np.ndarray:
    """Control formula at one step from explicit adjoint values and the frozen
    population correction of a solved consistency condition."""
    masked = bool(dc.mask_theta[i])
    mt = dc.grid.m_theta
    w_adv = cc.w[i + mt] if masked else np.zeros(dc.sc.n)
    to2d = lambda a: np.atleast_2d(np.asarray(a, dtype=float))
    out = control_values(dc, k, i, to2d(p_now), to2d(p_adv_ce), to2d(q_now), to2d(q_adv_ce),
                         w_adv, masked)
    return out[0] if np.asarray(p_now).ndim == 1 else out


def auxiliary_cost(dc: DerivedCoeffs, grid: TimeGrid, cc: CCSolution,
                   x: PathEnsemble, u: PathEnsemble, k: int = 0) -> float:
    """Single-agent surrogate cost of type k at frozen population grids.

    Quadratic own terms plus the linear tilts built from the frozen mean
    state and the population correction; the solved strategy should be
    stationary for this functional.
    """
    sc = dc.sc
    S, h, md, mt = grid.steps, grid.h, grid.m_delta, grid.m_theta
    hl = grid.history_len
    mask_d, mask_t = dc.mask_delta, dc.mask_theta
    total = np.zeros(x.M)
    for i in range(S):
        xi_now, xi_lag = x.at(i), x.at(i - md)
        ui_now, ui_lag = u.at(i), u.at(i - mt)
        th1 = dc.s_now.at(i) @ cc.xhat[hl + i]
        if mask_d[i]:
            th1 = th1 - dc.a_mix.at(i + md).T @ cc.w[i + md]
        th2 = dc.s_lag_w.at(i) @ cc.xhat[hl + i - md]
        th3 = (dc.b_mix.at(i + mt).T @ cc.w[i + mt]) if mask_t[i] else np.zeros(sc.d)
        total += h * (
            np.einsum("mi,ij,mj->m", xi_now, dc.q.at(i), xi_now)
            + np.einsum("mi,ij,mj->m", xi_lag, dc.q_lag.at(i), xi_lag)
            - 2.0 * xi_now @ th1 - 2.0 * xi_lag @ th2
            + np.einsum("mi,ij,mj->m", ui_now, dc.r[k].at(i), ui_now)
            + np.einsum("mi,ij,mj->m", ui_lag, dc.r_lag[k].at(i), ui_lag)
            + 2.0 * ui_now @ th3
        )
    xT = x.at(S)
    th4 = dc.g_cross @ cc.xhat[hl + S]
    total += np.einsum("mi,ij,mj->m", xT, sc.g, xT) - 2.0 * xT @ th4
    return 0.5 * float(tree_mean(total))
