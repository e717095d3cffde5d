"""Finite-population experiments under the decentralized strategy.

Each agent carries its own noise stream and initial draw; its control is the
frozen affine feedback from a solved consistency condition evaluated on its
own auxiliary state, so the strategy is measurable with respect to the
agent's private information.  The realized states then couple through the
true delayed population averages.

The module also measures everything the asymptotic-optimality analysis
quantifies: realized social cost, mean-field consistency gaps, the
perturbation response systems, the twelve coupling-gap terms of the social
cost variation, and log-log rate fits across population sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import solve_linear_absde
from .ccfix import CCSolution
from .condexp import CondExpOperator
from .forward import DivergenceError, VariationBundle, _ap, simulate_variation
from .grid import NoiseEnsemble, PathEnsemble, TimeGrid, tree_mean, tree_sum
from .scenario import DerivedCoeffs, MixReport, Scenario

__all__ = [
    "PopulationRun",
    "Perturbation",
    "AdmissibilityError",
    "simulate_population",
    "realized_pass",
    "agent_costs",
    "social_cost",
    "consistency_error",
    "EpsilonReport",
    "directional_derivative",
    "epsilon_terms",
    "RateFit",
    "rate_fit",
    "agent_seed",
]


class AdmissibilityError(ValueError):
    """Perturbation not measurable for the perturbed agent."""


def agent_seed(seed: int, a: int) -> int:
    return int((np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(a) * np.uint64(0x85EBCA77)
                + np.uint64(0x1234567)) & np.uint64(0xFFFFFFFFFFFFFFFF))


@dataclass
class Perturbation:
    """A control deviation for one agent.

    ``source`` is structural admissibility: deterministic paths or paths
    built from the perturbed agent's own noise are admissible.
    """

    values: np.ndarray  # (steps+1, d); zero pre-history implied
    source: str = "deterministic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.source not in ("deterministic", "agent-noise"):
            raise AdmissibilityError(f"perturbation source {self.source!r} uses foreign information")


@dataclass
class PopulationRun:
    mix: MixReport
    seed: int
    x_aux: np.ndarray  # (N, hist+steps+1, n) auxiliary states driving the strategy
    u: np.ndarray  # (N, steps+1, d) played controls
    x: np.ndarray  # (N, hist+steps+1, n) realized states
    dW: np.ndarray  # (N, steps)
    costs: np.ndarray  # (N,)
    social: float

    def xbar(self, hl: int) -> np.ndarray:
        return tree_mean(self.x, axis=0)

    def ubar(self) -> np.ndarray:
        return tree_mean(self.u, axis=0)


def _draw_agents(sc: Scenario, mix: MixReport, grid: TimeGrid, seed: int):
    N = mix.N
    xi = np.zeros((N, sc.n))
    dW = np.zeros((N, grid.steps))
    sqrt_h = np.sqrt(grid.h)
    for a in range(N):
        g = np.random.Generator(np.random.Philox(key=agent_seed(seed, a)))
        xi[a] = sc.xi[mix.assignment[a]].sample(g, 1)[0]
        dW[a] = g.standard_normal(grid.steps) * sqrt_h
    return xi, dW


def _u_hist(dc: DerivedCoeffs, grid: TimeGrid, j: int) -> np.ndarray:
    """Pre-history control value at negative grid index j."""
    return dc.u0_hist[grid.history_len + j]


def strategy_pass(dc: DerivedCoeffs, grid: TimeGrid, cc: CCSolution, mix: MixReport,
                  xi: np.ndarray, dW: np.ndarray):
    """Evaluate the decentralized strategy agent by agent.

    Integrates each agent's auxiliary state under the frozen population
    grids while reading its adjoints off the policy tables; returns the
    auxiliary states and the control paths.
    """
    from .forward import control_values

    sc = dc.sc
    N = mix.N
    S, h, md, mt, hl = grid.steps, grid.h, grid.m_delta, grid.m_theta, grid.history_len
    mask_t = dc.mask_theta
    blocks = [mix.agents_of_type(k) for k in range(sc.K)]

    Xa = np.zeros((N, hl + S + 1, sc.n))
    if hl:
        Xa[:, :hl] = dc.x0_hist[None, :, :]
    Xa[:, hl] = xi
    U = np.zeros((N, S + 1, sc.d))

    for i in range(S):
        for k in range(sc.K):
            idx = blocks[k]
            if len(idx) == 0:
                continue
            feats = np.hstack([Xa[idx, hl + i], Xa[idx, hl + i - md]])
            p = cc.policy.p[k][i].predict(feats)
            q = cc.policy.q[k][i].predict(feats)
            masked = bool(mask_t[i])
            if masked and mt > 0:
                p_adv = cc.policy.p_adv[k][i].predict(feats)
                q_adv = cc.policy.q_adv[k][i].predict(feats)
            elif masked:
                p_adv, q_adv = p, q
            else:
                p_adv = q_adv = np.zeros_like(p)
            w_adv = cc.w[i + mt] if masked else np.zeros(sc.n)
            U[idx, i] = control_values(dc, k, i, p, p_adv, q, q_adv, w_adv, masked)
        u_lag = U[:, i - mt] if i - mt >= 0 else np.tile(_u_hist(dc, grid, i - mt), (N, 1))
        for k in range(sc.K):
            idx = blocks[k]
            if len(idx) == 0:
                continue
            drift = (_ap(dc.a[k].at(i), Xa[idx, hl + i])
                     + _ap(dc.a_lag[k].at(i), Xa[idx, hl + i - md])
                     + (dc.a_mix.at(i) @ cc.xhat[hl + i - md])[None, :]
                     + _ap(dc.b.at(i), U[idx, i])
                     + _ap(dc.b_lag.at(i), u_lag[idx])
                     + (dc.b_mix.at(i) @ cc.uhat[hl + i - mt])[None, :])
            diff = _ap(dc.d_g.at(i), U[idx, i]) + _ap(dc.d_lag.at(i), u_lag[idx])
            nxt = Xa[idx, hl + i] + h * drift + diff * dW[idx, i : i + 1]
            if not np.all(np.isfinite(nxt)):
                raise DivergenceError(i + 1, "auxiliary state")
            Xa[idx, hl + i + 1] = nxt
    return Xa, U


def realized_pass(dc: DerivedCoeffs, grid: TimeGrid, mix: MixReport,
                  xi: np.ndarray, dW: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Integrate the realized states under given control paths.

    Couplings are the true empirical averages of the population, delayed by
    the state/control lags; the same stepping as every other integrator.
    """
    sc = dc.sc
    N = mix.N
    S, h, md, mt, hl = grid.steps, grid.h, grid.m_delta, grid.m_theta, grid.history_len
    blocks = [mix.agents_of_type(k) for k in range(sc.K)]

    X = np.zeros((N, hl + S + 1, sc.n))
    if hl:
        X[:, :hl] = dc.x0_hist[None, :, :]
    X[:, hl] = xi
    for i in range(S):
        xbar_lag = tree_mean(X[:, hl + i - md], axis=0)
        if i - mt >= 0:
            ubar_lag = tree_mean(U[:, i - mt], axis=0)
            u_lag = U[:, i - mt]
        else:
            ubar_lag = _u_hist(dc, grid, i - mt)
            u_lag = np.tile(ubar_lag, (N, 1))
        for k in range(sc.K):
            idx = blocks[k]
            if len(idx) == 0:
                continue
            drift = (_ap(dc.a[k].at(i), X[idx, hl + i])
                     + _ap(dc.a_lag[k].at(i), X[idx, hl + i - md])
                     + (dc.a_mix.at(i) @ xbar_lag)[None, :]
                     + _ap(dc.b.at(i), U[idx, i])
                     + _ap(dc.b_lag.at(i), u_lag[idx])
                     + (dc.b_mix.at(i) @ ubar_lag)[None, :])
            diff = _ap(dc.d_g.at(i), U[idx, i]) + _ap(dc.d_lag.at(i), u_lag[idx])
            nxt = X[idx, hl + i] + h * drift + diff * dW[idx, i : i + 1]
            if not np.all(np.isfinite(nxt)):
                raise DivergenceError(i + 1, "realized state")
            X[idx, hl + i + 1] = nxt
    return X


def agent_costs(dc: DerivedCoeffs, grid: TimeGrid, mix: MixReport,
                X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Per-agent realized cost: left-endpoint quadrature plus terminal term."""
    sc = dc.sc
    N = mix.N
    S, h, md, mt, hl = grid.steps, grid.h, grid.m_delta, grid.m_theta, grid.history_len
    out = np.zeros(N)
    types = mix.assignment
    for i in range(S):
        xbar = tree_mean(X[:, hl + i], axis=0)
        xbar_lag = tree_mean(X[:, hl + i - md], axis=0)
        u_lag = U[:, i - mt] if i - mt >= 0 else np.tile(_u_hist(dc, grid, i - mt), (N, 1))
        dev = X[:, hl + i] - (dc.s.at(i) @ xbar)[None, :]
        dev_lag = X[:, hl + i - md] - (dc.s_lag.at(i) @ xbar_lag)[None, :]
        q_term = np.einsum("ai,ij,aj->a", dev, dc.q.at(i), dev)
        q_lag_term = np.einsum("ai,ij,aj->a", dev_lag, dc.q_lag.at(i), dev_lag)
        r_term = np.zeros(N)
        r_lag_term = np.zeros(N)
        for k in range(sc.K):
            idx = mix.agents_of_type(k)
            if len(idx) == 0:
                continue
            r_term[idx] = np.einsum("ai,ij,aj->a", U[idx, i], dc.r[k].at(i), U[idx, i])
            r_lag_term[idx] = np.einsum("ai,ij,aj->a", u_lag[idx], dc.r_lag[k].at(i), u_lag[idx])
        out += h * (q_term + q_lag_term + r_term + r_lag_term)
    xbar_T = tree_mean(X[:, hl + S], axis=0)
    dev_T = X[:, hl + S] - (sc.gamma @ xbar_T)[None, :]
    out += np.einsum("ai,ij,aj->a", dev_T, sc.g, dev_T)
    return 0.5 * out


def simulate_population(sc: Scenario, grid: TimeGrid, cc: CCSolution, mix: MixReport,
                        seed: int, dc: DerivedCoeffs | None = None,
                        override: tuple | None = None) -> PopulationRun:
    """One realization of the N-agent system under the decentralized strategy.

    ``override=(agent, du, scale)`` plays ``u_agent + scale*du`` for one
    agent in the realized pass (the other agents' strategies are unchanged,
    their controls being functionals of their own information only).
    """
    from .scenario import derived_coefficients

    dc = dc or derived_coefficients(sc, grid)
    xi, dW = _draw_agents(sc, mix, grid, seed)
    x_aux, U = strategy_pass(dc, grid, cc, mix, xi, dW)
    if override is not None:
        agent, du, scale = override
        U = U.copy()
        U[agent, :, :] = U[agent, :, :] + scale * np.asarray(du, dtype=float)
    X = realized_pass(dc, grid, mix, xi, dW, U)
    costs = agent_costs(dc, grid, mix, X, U)
    return PopulationRun(mix=mix, seed=seed, x_aux=x_aux, u=U, x=X, dW=dW,
                         costs=costs, social=float(tree_sum(costs)))


def social_cost(run: PopulationRun, sc: Scenario, grid: TimeGrid,
                dc: DerivedCoeffs | None = None) -> tuple:
    """Social cost and the per-agent breakdown of a run."""
    from .scenario import derived_coefficients

    dc = dc or derived_coefficients(sc, grid)
    costs = agent_costs(dc, grid, run.mix, run.x, run.u)
    return float(tree_sum(costs)), costs


def consistency_error(run: PopulationRun, cc: CCSolution, grid: TimeGrid) -> dict:
    """Pathwise-sup squared gaps between empirical averages and frozen means."""
    hl = grid.history_len
    xbar = tree_mean(run.x[:, hl:], axis=0)
    gap_x = float(np.max(np.sum((xbar - cc.xhat[hl:]) ** 2, axis=1)))
    ubar = tree_mean(run.u[:, : grid.steps], axis=0)
    gap_u = float(np.max(np.sum((ubar - cc.uhat[hl : hl + grid.steps]) ** 2, axis=1)))
    return {"state_gap_sq": gap_x, "control_gap_sq": gap_u}


# ---------------------------------------------------------------------------
# directional derivative of the social cost and its coupling-gap terms
# ---------------------------------------------------------------------------


@dataclass
class EpsilonReport:
    eps: np.ndarray  # the twelve coupling-gap terms
    bracket: float  # the part that vanishes at the solved strategy
    derivative: float  # bracket + sum of the terms
    fd: float  # central finite difference on common random numbers
    diagnostics: dict  # squared sup-gaps behind the decay measurements

    @property
    def eps_sum(self) -> float:
        return float(np.sum(self.eps))


def _peer_adjoints(dc: DerivedCoeffs, grid: TimeGrid, run: PopulationRun,
                   ce: CondExpOperator):
    """Per-agent adjoints driven by the realized states, one sweep per type.

    Returns, per type, the adjoint values and the per-agent projections of
    the adjoint one state-delay ahead (cross-sectional regressions across
    the type's agents).
    """
    sc = dc.sc
    hl, md = grid.history_len, grid.m_delta
    ys, advs = [], []
    for k in range(sc.K):
        idx = run.mix.agents_of_type(k)
        Xk = PathEnsemble(grid, run.x[idx], kind="state")
        nz = NoiseEnsemble(grid=grid, seed=0, dW=run.dW[idx])
        res = solve_linear_absde(
            grid, nz,
            terminal=_ap(sc.g, Xk.at(grid.steps)),
            own_mat=lambda i, k=k: dc.a[k].at(i).T,
            adv_mat=lambda i, k=k: dc.a_lag[k].at(i + md).T,
            forcing=lambda i, k=k, Xk=Xk: _ap(dc.q_eff.at(i), Xk.at(i)),
            feats=lambda i, Xk=Xk: np.hstack([Xk.at(i), Xk.at(i - md)]),
            ce=ce, with_z=False,
        )
        ys.append(res.y)
        advs.append(res.y_adv_ce)
    return ys, advs


def epsilon_terms(sc: Scenario, grid: TimeGrid, cc: CCSolution, run: PopulationRun,
                  agent: int, du: Perturbation, dc: DerivedCoeffs | None = None,
                  ce: CondExpOperator | None = None,
                  var: VariationBundle | None = None) -> tuple:
    """The twelve coupling-gap terms and the main bracket for one replicate.

    Everything is evaluated pathwise on this run's realization and the
    matching perturbation responses, with the same quadrature as the cost.
    """
    from .scenario import derived_coefficients

    dc = dc or derived_coefficients(sc, grid)
    ce = ce or CondExpOperator()
    mix = run.mix
    k_i = int(mix.assignment[agent])
    N = mix.N
    S, h, md, mt, hl = grid.steps, grid.h, grid.m_delta, grid.m_theta, grid.history_len
    mask_d, mask_t = dc.mask_delta, dc.mask_theta

    if var is None:
        var = simulate_variation(dc, grid, du.values, k_i, mix, run.dW[agent])
    duv = var.du[0]

    ys, advs = _peer_adjoints(dc, grid, run, ce)

    eps = np.zeros(12)
    bracket = 0.0
    xhat = cc.xhat
    # per-type averages excluding the perturbed agent, divided by the full count
    def peer_avg(vals_by_type):
        out = []
        for k in range(sc.K):
            idx = mix.agents_of_type(k)
            local = np.nonzero(idx != agent)[0]
            if len(local) == 0:
                out.append(np.zeros(sc.n))
                continue
            out.append(tree_sum(vals_by_type[k][local]) / mix.counts[k])
        return out

    # diagnostics accumulators (sup over masked grid points)
    diag6 = 0.0
    diag7 = 0.0
    diag9 = np.zeros(sc.K)

    xT = run.x[:, hl + S]
    for i in range(S + 1):
        last = i == S
        wq = 1.0 if last else h
        x_i = run.x[agent, hl + i]
        dxi = var.dx_i.at(i)[0]
        dxi_lag = var.dx_i.at(i - md)[0]
        x_lag_i = run.x[agent, hl + i - md]
        u_i = run.u[agent, i] if not last else None
        xbar = tree_mean(run.x[:, hl + i], axis=0)
        xbar_lag = tree_mean(run.x[:, hl + i - md], axis=0)
        davg = var.dx_avg(i)[0]
        davg_lag = var.dx_avg(i - md)[0] if i - md >= -hl else np.zeros(sc.n)

        if last:
            # terminal pieces
            bracket += float(xT[agent] @ sc.g @ dxi) - float((dc.g_cross @ xhat[hl + S]) @ dxi)
            eps[2] += float((dc.g_cross @ (xhat[hl + S] - xbar)) @ (N * davg))
            for k in range(sc.K):
                gap = var.x_lim[k].at(S)[0] - var.dx_grp[k].at(S)[0]
                eps[7] += float((dc.g_cross @ xhat[hl + S]) @ gap)
                idx = mix.agents_of_type(k)
                local = np.nonzero(idx != agent)[0]
                if len(local):
                    avg_x = tree_sum(run.x[idx[local], hl + S]) / mix.counts[k]
                    pdiff = mix.counts[k] * var.dx_peer(k, S)[0] - var.x_lim[k].at(S)[0]
                    eps[8] += float((sc.g @ avg_x) @ pdiff)
            break

        # main bracket, running part
        t1 = float(x_i @ dc.q.at(i) @ dxi) - float((dc.s_now.at(i) @ xhat[hl + i]) @ dxi)
        t2 = float(x_lag_i @ dc.q_lag.at(i) @ dxi_lag) \
            - float((dc.s_lag_w.at(i) @ xhat[hl + i - md]) @ dxi_lag)
        t3 = 0.0
        if mask_d[i]:
            at_adv = dc.a_mix.at(i + md).T
            for k in range(sc.K):
                t3 += sc.pi[k] * float((at_adv @ (cc.yhat[k][i + md] + cc.zeta[k][i + md])) @ dxi)
        t4 = 0.0
        if mask_t[i]:
            bt_adv = dc.b_mix.at(i + mt).T
            for k in range(sc.K):
                t4 += sc.pi[k] * float((bt_adv @ (cc.yhat[k][i + mt] + cc.zeta[k][i + mt])) @ duv[i])
        u_lag = run.u[agent, i - mt] if i - mt >= 0 else _u_hist(dc, grid, i - mt)
        du_lag = duv[i - mt] if i - mt >= 0 else np.zeros(sc.d)
        t5 = float(u_i @ dc.r[k_i].at(i) @ duv[i]) + float(u_lag @ dc.r_lag[k_i].at(i) @ du_lag)
        bracket += h * (t1 + t2 + t3 + t4 + t5)

        # coupling-gap terms
        eps[0] += h * float((dc.s_now.at(i) @ (xhat[hl + i] - xbar)) @ (N * davg))
        eps[1] += h * float((dc.s_lag_w.at(i) @ (xhat[hl + i - md] - xbar_lag)) @ (N * davg_lag))
        adv_avgs = peer_avg([a.at(i) for a in advs]) if mask_d[i] else None
        for k in range(sc.K):
            gap = var.x_lim[k].at(i)[0] - var.dx_grp[k].at(i)[0]
            gap_lag = var.x_lim[k].at(i - md)[0] - var.dx_grp[k].at(i - md)[0]
            diag6 = max(diag6, float(gap @ gap))
            eps[3] += h * float((dc.s_now.at(i) @ xhat[hl + i]) @ gap)
            eps[5] += h * float((dc.s_lag_w.at(i) @ xhat[hl + i - md]) @ gap_lag)
            idx = mix.agents_of_type(k)
            local = np.nonzero(idx != agent)[0]
            pdiff = mix.counts[k] * var.dx_peer(k, i)[0] - var.x_lim[k].at(i)[0]
            pdiff_lag = mix.counts[k] * var.dx_peer(k, i - md)[0] - var.x_lim[k].at(i - md)[0]
            if len(local):
                diag7 = max(diag7, float(pdiff @ pdiff))
                avg_x = tree_sum(run.x[idx[local], hl + i]) / mix.counts[k]
                avg_x_lag = tree_sum(run.x[idx[local], hl + i - md]) / mix.counts[k]
                eps[4] += h * float((dc.q.at(i) @ avg_x) @ pdiff)
                eps[6] += h * float((dc.q_lag.at(i) @ avg_x_lag) @ pdiff_lag)
            if mask_d[i]:
                at_adv = dc.a_mix.at(i + md).T
                ce_gap = adv_avgs[k] - cc.yhat[k][i + md]
                diag9[k] = max(diag9[k], float(ce_gap @ ce_gap))
                eps[9] += h * sc.pi[k] * float((at_adv @ ce_gap) @ dxi)
                lim_k = var.x_lim[k].at(i)[0]
                all_gap = np.zeros(sc.n)
                for l in range(sc.K):
                    all_gap += sc.pi[l] * (at_adv @ (adv_avgs[l] - cc.yhat[l][i + md]))
                eps[10] += h * float(all_gap @ lim_k)
            if mask_t[i] and len(local):
                bt_adv = dc.b_mix.at(i + mt).T
                # average of the future adjoint values; pairing with an adapted
                # perturbation makes this an unbiased stand-in for the average
                # of their time-i projections
                avg_yth = tree_sum(ys[k].at(i + mt)[local]) / mix.counts[k]
                ce_gap_t = avg_yth - cc.yhat[k][i + mt]
                eps[11] += h * sc.pi[k] * float((bt_adv @ ce_gap_t) @ duv[i])

    diagnostics = {
        "aggregate_limit_gap_sq": diag6,
        "peer_limit_gap_sq": diag7,
        "adjoint_average_gap_sq": float(np.sum(diag9)),
    }
    report = EpsilonReport(eps=eps, bracket=bracket, derivative=bracket + float(np.sum(eps)),
                           fd=np.nan, diagnostics=diagnostics)
    return report, var


def directional_derivative(sc: Scenario, grid: TimeGrid, cc: CCSolution, mix: MixReport,
                           agent: int, du: Perturbation, seeds, fd_step: float = 1e-3,
                           dc: DerivedCoeffs | None = None) -> EpsilonReport:
    """Variation of the social cost along one agent's perturbation.

    Averages the explicit evaluation over replicates and cross-checks with a
    central finite difference of the realized social cost on the same random
    numbers.
    """
    from .scenario import derived_coefficients

    dc = dc or derived_coefficients(sc, grid)
    reports = []
    fds = []
    for seed in np.atleast_1d(seeds):
        run = simulate_population(sc, grid, cc, mix, int(seed), dc=dc)
        rep, _ = epsilon_terms(sc, grid, cc, run, agent, du, dc=dc)
        xi, dW = _draw_agents(sc, mix, grid, int(seed))
        up = run.u.copy()
        up[agent] += fd_step * du.values
        dn = run.u.copy()
        dn[agent] -= fd_step * du.values
        j_up = agent_costs(dc, grid, mix, realized_pass(dc, grid, mix, xi, dW, up), up)
        j_dn = agent_costs(dc, grid, mix, realized_pass(dc, grid, mix, xi, dW, dn), dn)
        fds.append((float(tree_sum(j_up)) - float(tree_sum(j_dn))) / (2.0 * fd_step))
        reports.append(rep)

    eps = np.mean([r.eps for r in reports], axis=0)
    bracket = float(np.mean([r.bracket for r in reports]))
    diag = {key: float(np.mean([r.diagnostics[key] for r in reports]))
            for key in reports[0].diagnostics}
    return EpsilonReport(eps=eps, bracket=bracket, derivative=bracket + float(np.sum(eps)),
                         fd=float(np.mean(fds)), diagnostics=diag)


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------


@dataclass
class RateFit:
    slope: float
    intercept: float
    band: float  # jackknife standard error of the slope

    def __repr__(self):
        return f"RateFit(slope={self.slope:.3f} +/- {self.band:.3f})"


def rate_fit(n_values, metric_values) -> RateFit:
    """Least-squares slope of log(metric) against log(N), jackknife band."""
    n = np.asarray(n_values, dtype=float)
    y = np.asarray(metric_values, dtype=float)
    if len(n) < 2:
        raise ValueError("need at least two points")
    if np.any(y <= 0):
        raise ValueError("metric values must be positive for a log-log fit")
    lx, ly = np.log(n), np.log(y)

    def slope_of(ix):
        A = np.vstack([lx[ix], np.ones(len(ix))]).T
        coef, *_ = np.linalg.lstsq(A, ly[ix], rcond=None)
        return coef

    full = slope_of(np.arange(len(n)))
    if len(n) > 2:
        jack = [slope_of(np.delete(np.arange(len(n)), j))[0] for j in range(len(n))]
        band = float(np.sqrt((len(n) - 1) * np.var(jack)))
    else:
        band = float("inf")
    return RateFit(slope=float(full[0]), intercept=float(full[1]), band=band)
