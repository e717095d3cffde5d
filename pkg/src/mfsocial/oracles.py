"""Independent ground-truth solvers for degenerate subclasses.

Two oracles that share nothing with the fixed-point machinery except the
grid conventions: a classical final-value matrix Riccati solver for the
no-delay decoupled case, and an exact discrete quadratic program over all
agents' open-loop controls for deterministic instances (zero control-noise
gains and point-mass initial data).  The QP simulates with the identical
delayed-Euler recursion as the population module, so cost gaps measure
strategy suboptimality, not discretization mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import _ap
from .grid import TimeGrid, tree_mean, tree_sum
from .population import agent_costs
from .scenario import DerivedCoeffs, MixReport, Scenario, derived_coefficients

__all__ = [
    "RiccatiSolution",
    "riccati_lq",
    "QPSolution",
    "deterministic_qp",
    "qp_gradient",
    "OracleSubclassError",
]


class OracleSubclassError(ValueError):
    """Oracle called outside its supported subclass."""


# ---------------------------------------------------------------------------
# no-delay LQ Riccati oracle
# ---------------------------------------------------------------------------


@dataclass
class RiccatiSolution:
    grid_times: np.ndarray
    P: np.ndarray  # (steps+1, n, n), final value at the horizon
    gains: np.ndarray  # (steps+1, d, n): u = -gain x
    offset: np.ndarray  # affine value offset, zero for the homogeneous case

    def value(self, x0) -> float:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return 0.5 * float(x0 @ self.P[0] @ x0)

    def simulate(self, A: np.ndarray, B: np.ndarray, x0, h: float):
        """Closed-loop trajectory under the feedback, same explicit stepping
        as the simulators (for like-for-like comparisons)."""
        S = len(self.gains) - 1
        n = self.P.shape[1]
        x = np.zeros((S + 1, n))
        u = np.zeros((S + 1, self.gains.shape[1]))
        x[0] = np.atleast_1d(x0)
        for i in range(S):
            u[i] = -self.gains[i] @ x[i]
            x[i + 1] = x[i] + h * (A @ x[i] + B @ u[i])
        u[S] = -self.gains[S] @ x[S]
        return x, u


def riccati_lq(A, B, Q, R, G, T: float, h: float) -> RiccatiSolution:
    """Final-value matrix Riccati equation integrated backward with RK4."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    n = A.shape[0]
    S = int(round(T / h))
    if abs(S * h - T) > 1e-12:
        raise ValueError("h must divide T")
    Rinv = np.linalg.inv(R)

    def f(P):
        return A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q

    P = np.zeros((S + 1, n, n))
    P[S] = G
    for i in range(S - 1, -1, -1):
        p = P[i + 1]
        k1 = f(p)
        k2 = f(p + 0.5 * h * k1)
        k3 = f(p + 0.5 * h * k2)
        k4 = f(p + h * k3)
        P[i] = p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        P[i] = 0.5 * (P[i] + P[i].T)
        if not np.all(np.isfinite(P[i])) or np.abs(P[i]).max() > 1e12:
            raise FloatingPointError(f"Riccati blow-up at step {i}")
    gains = np.stack([Rinv @ B.T @ P[i] for i in range(S + 1)])
    return RiccatiSolution(grid_times=np.arange(S + 1) * h, P=P, gains=gains,
                           offset=np.zeros((S + 1, n)))


# ---------------------------------------------------------------------------
# deterministic centralized quadratic program
# ---------------------------------------------------------------------------


@dataclass
class QPSolution:
    controls: np.ndarray  # (N, steps, d)
    objective: float
    kkt_residual: float
    states: np.ndarray  # (N, hist+steps+1, n)
    cg_iterations: int


def _check_deterministic(sc: Scenario):
    if np.abs(sc.d_g.values).max() > 0 or np.abs(sc.d_lag.values).max() > 0:
        raise OracleSubclassError("QP oracle requires zero control-noise gains")
    for law in sc.xi:
        if law.kind != "point" and np.abs(law.cov).max() > 0:
            raise OracleSubclassError("QP oracle requires point-mass initial data")


def _simulate_det(dc: DerivedCoeffs, grid: TimeGrid, mix: MixReport, U: np.ndarray) -> np.ndarray:
    """Deterministic population recursion; U is (N, steps, d)."""
    from .population import realized_pass

    sc = dc.sc
    N = mix.N
    xi = np.stack([sc.xi[mix.assignment[a]].mean for a in range(N)])
    Ufull = np.concatenate([U, np.zeros((N, 1, sc.d))], axis=1)
    return realized_pass(dc, grid, mix, xi, np.zeros((N, grid.steps)), Ufull)


def _objective(dc: DerivedCoeffs, grid: TimeGrid, mix: MixReport, U: np.ndarray) -> float:
    X = _simulate_det(dc, grid, mix, U)
    Ufull = np.concatenate([U, np.zeros((mix.N, 1, dc.sc.d))], axis=1)
    return float(tree_sum(agent_costs(dc, grid, mix, X, Ufull)))


def qp_gradient(dc: DerivedCoeffs, grid: TimeGrid, mix: MixReport, U: np.ndarray) -> np.ndarray:
    """Exact gradient of the social objective by a discrete adjoint sweep.

    The reverse recursion mirrors every dependency of the forward one: the
    own-state factor, the delayed own-state factor, and the delayed
    population-average factor spread over all agents.
    """
    sc = dc.sc
    N = mix.N
    S, h, md, mt, hl = grid.steps, grid.h, grid.m_delta, grid.m_theta, grid.history_len
    X = _simulate_det(dc, grid, mix, U)
    lam = np.zeros((N, S + 1, sc.n))
    types = mix.assignment

    xbar_T = tree_mean(X[:, hl + S], axis=0)
    dev_T = X[:, hl + S] - (sc.gamma @ xbar_T)[None, :]
    g_dev = _ap(sc.g, dev_T)
    lam[:, S] = g_dev - _ap(sc.gamma.T, np.tile(tree_mean(g_dev, axis=0), (N, 1)))

    def cost_grad_at(i):
        """d(running cost at quadrature point i)/dx(., i) and /dx(., i - md)."""
        xbar = tree_mean(X[:, hl + i], axis=0)
        xbar_lag = tree_mean(X[:, hl + i - md], axis=0)
        dev = X[:, hl + i] - (dc.s.at(i) @ xbar)[None, :]
        dev_lag = X[:, hl + i - md] - (dc.s_lag.at(i) @ xbar_lag)[None, :]
        qd = _ap(dc.q.at(i), dev)
        qld = _ap(dc.q_lag.at(i), dev_lag)
        gnow = qd - _ap(dc.s.at(i).T, np.tile(tree_mean(qd, axis=0), (N, 1)))
        glag = qld - _ap(dc.s_lag.at(i).T, np.tile(tree_mean(qld, axis=0), (N, 1)))
        return gnow, glag

    grads_now = {}
    grads_lag = {}
    for i in range(S):
        grads_now[i], grads_lag[i] = cost_grad_at(i)

    for i in range(S - 1, -1, -1):
        acc = lam[:, i + 1].copy()
        for k in range(sc.K):
            idx = mix.agents_of_type(k)
            acc[idx] += h * _ap(dc.a[k].at(i).T, lam[idx, i + 1])
        p = i + md
        if p <= S - 1:
            for k in range(sc.K):
                idx = mix.agents_of_type(k)
                acc[idx] += h * _ap(dc.a_lag[k].at(p).T, lam[idx, p + 1])
            acc += (h / N) * np.tile(dc.a_mix.at(p).T @ tree_sum(lam[:, p + 1]), (N, 1))
        if i <= S - 1:
            acc += h * grads_now[i]
        if p <= S - 1:
            acc += h * grads_lag[p]
        lam[:, i] = acc

    grad = np.zeros((N, S, sc.d))
    for i in range(S):
        for k in range(sc.K):
            idx = mix.agents_of_type(k)
            grad[idx, i] = h * _ap(dc.r[k].at(i), U[idx, i])
            grad[idx, i] += h * _ap(dc.b.at(i).T, lam[idx, i + 1])
        p = i + mt
        if p <= S - 1:
            for k in range(sc.K):
                idx = mix.agents_of_type(k)
                grad[idx, i] += h * _ap(dc.r_lag[k].at(p), U[idx, i])
                grad[idx, i] += h * _ap(dc.b_lag.at(p).T, lam[idx, p + 1])
            grad[:, i] += (h / N) * np.tile(dc.b_mix.at(p).T @ tree_sum(lam[:, p + 1]), (N, 1))
    return grad


def deterministic_qp(sc: Scenario, grid: TimeGrid, N: int, mix: MixReport | None = None,
                     tol: float = 1e-8, max_iter: int = 5000) -> QPSolution:
    """Exact discrete centralized optimum for deterministic instances.

    Matrix-free conjugate gradients on the normal equations of the strictly
    convex quadratic objective; the KKT residual is the final gradient norm.
    """
    from .scenario import empirical_mix

    _check_deterministic(sc)
    dc = derived_coefficients(sc, grid)
    mix = mix or empirical_mix(N, sc.pi)
    S = grid.steps
    shape = (mix.N, S, sc.d)

    g0 = qp_gradient(dc, grid, mix, np.zeros(shape))

    def hess_v(v):
        return qp_gradient(dc, grid, mix, v) - g0

    # conjugate gradients on H u = -g0
    u = np.zeros(shape)
    r = -g0.copy()
    p = r.copy()
    rs = float(np.sum(r * r))
    it = 0
    b_norm = np.sqrt(rs)
    if b_norm > 0:
        for it in range(1, max_iter + 1):
            Hp = hess_v(p)
            denom = float(np.sum(p * Hp))
            if denom <= 0:
                raise FloatingPointError("curvature lost in CG (objective not convex?)")
            alpha = rs / denom
            u += alpha * p
            r -= alpha * Hp
            rs_new = float(np.sum(r * r))
            if np.sqrt(rs_new) <= tol:
                rs = rs_new
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        else:
            raise FloatingPointError(f"CG did not reach tolerance; residual {np.sqrt(rs):.3e}")

    X = _simulate_det(dc, grid, mix, u)
    obj = _objective(dc, grid, mix, u)
    kkt = float(np.sqrt(np.sum(qp_gradient(dc, grid, mix, u) ** 2)))
    return QPSolution(controls=u, objective=obj, kkt_residual=kkt, states=X, cg_iterations=it)
