"""Explicit Euler integration of the forward delayed systems.

Covers the forward half-sweep of the fixed-point solver (representative
states driven by the current backward iterate), and the single-agent
perturbation systems: the perturbed agent's response, the per-type aggregate
responses of the other agents, and their large-population limits.

Everything steps with the same convention: drift coefficients at the left
endpoint, delayed reads through the stored history, population means frozen
at ensemble averages of the current iterate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .condexp import CondExpOperator, FittedMap
from .grid import NoiseEnsemble, PathEnsemble, TimeGrid, tree_mean
from .scenario import DerivedCoeffs, MixReport

__all__ = [
    "DivergenceError",
    "ForwardResult",
    "control_values",
    "advanced_ce",
    "cc_forward",
    "VariationBundle",
    "simulate_variation",
]


class DivergenceError(FloatingPointError):
    """A path went non-finite; carries the first bad step."""

    def __init__(self, step: int, what: str = "forward state"):
        super().__init__(f"{what} non-finite at step {step}")
        self.step = step


def _ap(mat: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Apply a matrix to a batch of row vectors: (M,j) x (i,j)^T -> (M,i)."""
    return vecs @ mat.T


def control_values(dc: DerivedCoeffs, k: int, i: int,
                   p_now: np.ndarray, p_adv: np.ndarray,
                   q_now: np.ndarray, q_adv: np.ndarray,
                   w_adv: np.ndarray, masked: bool) -> np.ndarray:
    """Decentralized control at one grid step from adjoint values.

    ``p_adv``/``q_adv`` are conditional expectations of the adjoints one
    control-delay ahead; together with the population correction ``w_adv``
    they contribute only inside the advanced window (``masked`` True).
    """
    grid = dc.grid
    mt = grid.m_theta
    rhs = _ap(dc.b.at(i).T, p_now) + _ap(dc.d_g.at(i).T, q_now)
    if masked:
        rhs = rhs + _ap(dc.b_lag.at(i + mt).T, p_adv) + _ap(dc.d_lag.at(i + mt).T, q_adv)
        rhs = rhs + (dc.b_mix.at(i + mt).T @ w_adv)[None, :]
    return -_ap(dc.r_eff_inv[k].at(i), rhs)


def advanced_ce(ens_vals: np.ndarray, feats: np.ndarray | None, ce: CondExpOperator) -> np.ndarray:
    """Projection of future values onto time-i information.

    With no feature source available the projection degenerates to the
    cross-path mean.
    """
    if feats is None:
        return np.tile(tree_mean(ens_vals, axis=0), (ens_vals.shape[0], 1))
    return ce.fit(feats, ens_vals).predict(feats)


def state_features(x: PathEnsemble, i: int) -> np.ndarray:
    """Adapted features at step i: current and delayed state."""
    return np.hstack([x.at(i), x.at(i - x.grid.m_delta) if x.grid.m_delta > 0 else x.at(i)])


@dataclass
class ForwardResult:
    x: list  # per-type state PathEnsemble
    v: list  # per-type control PathEnsemble
    xhat: np.ndarray  # (history_len + steps + 1, n) population mean state
    uhat: np.ndarray  # (history_len + steps + 1, d) population mean control


def cc_forward(dc: DerivedCoeffs, grid: TimeGrid,
               p_list: list | None, q_list: list | None, w: np.ndarray,
               noise: list, ce: CondExpOperator,
               feats_src: list | None,
               xi_draws: list | None = None) -> ForwardResult:
    """Forward half-sweep: controls from the backward iterate, then states.

    The controls are evaluated first (they depend only on backward
    quantities), their ensemble means define the frozen population control;
    the states then integrate with the frozen delayed population mean built
    up on the fly from the current ensembles.
    """
    sc = dc.sc
    K, n, d = sc.K, sc.n, sc.d
    S, h, md, mt = grid.steps, grid.h, grid.m_delta, grid.m_theta
    hl = grid.history_len
    M = noise[0].M

    mask_t = dc.mask_theta
    v_list = []
    for k in range(K):
        v = PathEnsemble.zeros(grid, M, d, kind="control")
        v.set_history(dc.u0_hist)
        if p_list is None:
            v_list.append(v)
            continue
        p, q = p_list[k], q_list[k]
        for i in range(S):
            masked = bool(mask_t[i])
            feats = state_features(feats_src[k], i) if feats_src is not None else None
            if masked and mt > 0:
                p_adv = advanced_ce(p.at(i + mt), feats, ce)
                q_adv = advanced_ce(q.at(i + mt), feats, ce)
            elif masked:  # theta = 0: conditioning is the identity
                p_adv, q_adv = p.at(i), q.at(i)
            else:
                p_adv = q_adv = np.zeros((M, n))
            w_adv = w[i + mt] if masked else np.zeros(n)
            v.set(i, control_values(dc, k, i, p.at(i), p_adv, q.at(i), q_adv, w_adv, masked))
        v_list.append(v)

    # frozen population-average control
    uhat = np.zeros((hl + S + 1, d))
    uhat[:hl] = dc.u0_hist
    for k in range(K):
        uhat[hl:] += sc.pi[k] * tree_mean(v_list[k].body(), axis=0)

    # states, with the population-average state accumulated as we go
    x_list = []
    for k in range(K):
        x = PathEnsemble.zeros(grid, M, n, kind="state")
        x.set_history(dc.x0_hist)
        if xi_draws is not None:
            x.set(0, xi_draws[k])
        else:
            x.set(0, np.tile(sc.xi[k].mean, (M, 1)))
        x_list.append(x)
    xhat = np.zeros((hl + S + 1, n))
    xhat[:hl] = dc.x0_hist

    def xhat_update(i: int):
        xhat[hl + i] = sum(sc.pi[k] * tree_mean(x_list[k].at(i), axis=0) for k in range(K))

    xhat_update(0)
    for i in range(S):
        xh_lag = xhat[hl + i - md]
        for k in range(K):
            x, v = x_list[k], v_list[k]
            xi_now = x.at(i)
            drift = (_ap(dc.a[k].at(i), xi_now)
                     + _ap(dc.a_lag[k].at(i), x.at(i - md))
                     + (dc.a_mix.at(i) @ xh_lag)[None, :]
                     + _ap(dc.b.at(i), v.at(i))
                     + _ap(dc.b_lag.at(i), v.at(i - mt))
                     + (dc.b_mix.at(i) @ uhat[hl + i - mt])[None, :])
            diff = _ap(dc.d_g.at(i), v.at(i)) + _ap(dc.d_lag.at(i), v.at(i - mt))
            nxt = xi_now + h * drift + diff * noise[k].dW[:, i : i + 1]
            if not np.all(np.isfinite(nxt)):
                raise DivergenceError(i + 1)
            x.set(i + 1, nxt)
        xhat_update(i + 1)

    return ForwardResult(x=x_list, v=v_list, xhat=xhat, uhat=uhat)


# ---------------------------------------------------------------------------
# variation systems for a single perturbed agent
# ---------------------------------------------------------------------------


@dataclass
class VariationBundle:
    """Responses to one agent's control perturbation.

    ``dx_i``: the perturbed agent's state response (carries the diffusion
    terms).  ``dx_grp[k]``: aggregate response of the unperturbed agents of
    type k (their individual responses coincide, all being driven by the same
    inputs from zero data).  ``x_lim[k]``: the large-population limit system
    that replaces both the aggregate and the rescaled individual responses.
    """

    du: np.ndarray  # (R, steps+1, d), zero pre-history implied
    dx_i: PathEnsemble
    dx_grp: list
    x_lim: list
    agent_type: int
    mix: MixReport

    def dx_avg(self, i: int) -> np.ndarray:
        """Population-average response at grid index i."""
        total = self.dx_i.at(i).copy()
        for g in self.dx_grp:
            total += g.at(i)
        return total / self.mix.N

    def dx_peer(self, k: int, i: int) -> np.ndarray:
        """Individual response of an unperturbed type-k agent."""
        cnt = self.mix.counts[k] - (1 if self.agent_type == k else 0)
        if cnt <= 0:
            return np.zeros_like(self.dx_grp[k].at(i))
        return self.dx_grp[k].at(i) / cnt


def simulate_variation(dc: DerivedCoeffs, grid: TimeGrid, du: np.ndarray,
                       agent_type: int, mix: MixReport,
                       dW_agent: np.ndarray) -> VariationBundle:
    """Integrate the perturbation systems for one deviating agent.

    ``du`` is (steps+1, d) or (R, steps+1, d) with zero pre-history; the
    perturbed agent's response carries the control-noise terms driven by
    ``dW_agent`` (R, steps).
    """
    sc = dc.sc
    K, n = sc.K, sc.n
    S, h, md, mt = grid.steps, grid.h, grid.m_delta, grid.m_theta
    N = mix.N
    du = np.asarray(du, dtype=float)
    if du.ndim == 2:
        du = du[None, :, :]
    R = du.shape[0]
    if dW_agent.ndim == 1:
        dW_agent = dW_agent[None, :]

    dx_i = PathEnsemble.zeros(grid, R, n)
    dx_grp = [PathEnsemble.zeros(grid, R, n) for _ in range(K)]
    x_lim = [PathEnsemble.zeros(grid, R, n) for _ in range(K)]

    def du_at(j: int) -> np.ndarray:
        return du[:, j, :] if j >= 0 else np.zeros((R, du.shape[2]))

    for i in range(S):
        davg_lag = dx_i.at(i - md).copy()
        for k in range(K):
            davg_lag += dx_grp[k].at(i - md)
        davg_lag /= N
        du_lag = du_at(i - mt)
        lim_lag_sum = np.zeros((R, n))
        for k in range(K):
            lim_lag_sum += x_lim[k].at(i - md)

        bmix_i = dc.b_mix.at(i)
        amix_i = dc.a_mix.at(i)

        drift_i = (_ap(dc.a[agent_type].at(i), dx_i.at(i))
                   + _ap(dc.a_lag[agent_type].at(i), dx_i.at(i - md))
                   + _ap(amix_i, davg_lag)
                   + _ap(dc.b.at(i), du_at(i))
                   + _ap(dc.b_lag.at(i), du_lag)
                   + _ap(bmix_i, du_lag) / N)
        diff_i = _ap(dc.d_g.at(i), du_at(i)) + _ap(dc.d_lag.at(i), du_lag)
        nxt_i = dx_i.at(i) + h * drift_i + diff_i * dW_agent[:, i : i + 1]
        if not np.all(np.isfinite(nxt_i)):
            raise DivergenceError(i + 1, "perturbation response")

        for k in range(K):
            cnt = mix.counts[k] - (1 if agent_type == k else 0)
            g = dx_grp[k]
            drift_g = (_ap(dc.a[k].at(i), g.at(i))
                       + _ap(dc.a_lag[k].at(i), g.at(i - md))
                       + cnt * _ap(amix_i, davg_lag)
                       + (cnt / N) * _ap(bmix_i, du_lag))
            g.set(i + 1, g.at(i) + h * drift_g)

            lim = x_lim[k]
            drift_l = (_ap(dc.a[k].at(i), lim.at(i))
                       + _ap(dc.a_lag[k].at(i), lim.at(i - md))
                       + sc.pi[k] * _ap(amix_i, dx_i.at(i - md))
                       + sc.pi[k] * _ap(amix_i, lim_lag_sum)
                       + sc.pi[k] * _ap(bmix_i, du_lag))
            lim.set(i + 1, lim.at(i) + h * drift_l)

        dx_i.set(i + 1, nxt_i)

    return VariationBundle(du=du, dx_i=dx_i, dx_grp=dx_grp, x_lim=x_lim,
                           agent_type=agent_type, mix=mix)
