"""Domain model of the K-type delayed LQ population.

A scenario bundles the dynamics coefficients, cost weights, delays, and
initial data of a heterogeneous population in which each agent's state feels
its own delayed state/control and the delayed population averages.  This
module owns validation of the standing assumptions, the derived coefficient
tables built from the effective control weight, and the stacked block-matrix
norms consumed by the well-posedness certificate.

Coefficients are piecewise-constant paths: a value is held on
``[times[j], times[j+1])``.  Cost weights that the model forces to vanish
after the horizon (the delayed state/control weights) carry an explicit
``zero_after`` marker when built from constant shorthand.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .grid import TimeGrid, tree_sum

__all__ = [
    "CoefficientPath",
    "Scenario",
    "InitialLaw",
    "ScenarioStructureError",
    "DefinitenessError",
    "CheckResult",
    "ValidationReport",
    "validate_scenario",
    "MixReport",
    "empirical_mix",
    "Table",
    "DerivedCoeffs",
    "derived_coefficients",
    "NormBundle",
    "block_norms",
    "load_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
    "canonical_json",
    "scenario_hash",
]

_TOL = 1e-12


class ScenarioStructureError(ValueError):
    """Malformed scenario: dimension mismatch or missing data."""


class DefinitenessError(ValueError):
    """A matrix that must be invertible/definite is not."""


# ---------------------------------------------------------------------------
# piecewise-constant paths
# ---------------------------------------------------------------------------


@dataclass
class CoefficientPath:
    """Piecewise-constant matrix- or vector-valued path.

    ``values[j]`` is held on ``[times[j], times[j+1])``; the final value is
    held to the end of the window.  If ``zero_after`` is set, evaluation
    beyond that time returns zeros (the forced post-horizon tail of the
    delayed cost weights).
    """

    times: np.ndarray
    values: np.ndarray  # (P, *shape)
    zero_after: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1 or len(self.times) != self.values.shape[0]:
            raise ScenarioStructureError("times/values length mismatch")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ScenarioStructureError("breakpoints must be strictly increasing")

    @classmethod
    def constant(cls, value, start: float = 0.0, zero_after: float | None = None) -> "CoefficientPath":
        v = np.asarray(value, dtype=float)
        return cls(times=np.array([start]), values=v[None, ...], zero_after=zero_after)

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    def eval(self, t: float) -> np.ndarray:
        if self.zero_after is not None and t > self.zero_after + _TOL:
            return np.zeros(self.shape)
        if t < self.times[0] - 1e-9:
            raise ScenarioStructureError(f"path evaluated at t={t} before its window start {self.times[0]}")
        idx = int(np.searchsorted(self.times, t + _TOL, side="right") - 1)
        idx = max(idx, 0)
        return self.values[idx]

    def probe_times(self, lo: float, hi: float) -> np.ndarray:
        """Representative times covering [lo, hi]: breakpoints plus endpoints."""
        pts = [lo] + [float(t) for t in self.times if lo < t <= hi] + [hi]
        return np.unique(np.asarray(pts))

    def scaled(self, s: float) -> "CoefficientPath":
        return CoefficientPath(self.times.copy(), self.values * s, self.zero_after)

    def to_spec(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "values": self.values.tolist(),
            "zero_after": self.zero_after,
        }


@dataclass
class InitialLaw:
    """Per-type law of the initial state: gaussian or point mass."""

    kind: str  # "gaussian" | "point"
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.kind not in ("gaussian", "point"):
            raise ScenarioStructureError(f"unsupported initial law kind {self.kind!r}")

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        if self.kind == "point":
            return np.tile(self.mean, (m, 1))
        chol = np.linalg.cholesky(self.cov + 1e-15 * np.eye(len(self.mean)))
        z = rng.standard_normal((m, len(self.mean)))
        return self.mean[None, :] + z @ chol.T


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    K: int
    n: int
    d: int
    T: float
    delta: float
    theta: float
    pi: np.ndarray
    # dynamics: per-type own-state gains, shared mixing and control gains
    a: list  # K paths, (n,n) on [0,T]
    a_lag: list  # K paths, (n,n) on [0,T+delta]
    a_mix: CoefficientPath  # (n,n) on [0,T+delta]
    b: CoefficientPath  # (n,d) on [-theta,T]
    b_lag: CoefficientPath  # (n,d) on [0,T+theta]
    b_mix: CoefficientPath  # (n,d) on [0,T+theta]
    d_g: CoefficientPath  # diffusion control gain, (n,d) on [-theta,T]
    d_lag: CoefficientPath  # (n,d) on [0,T+theta]
    # cost weights
    q: CoefficientPath  # (n,n) on [0,T]
    q_lag: CoefficientPath  # (n,n) on [0,T+delta], zero tail
    s: CoefficientPath  # (n,n) on [0,T]
    s_lag: CoefficientPath  # (n,n) on [0,T+delta], zero tail
    r: list  # K paths, (d,d) on [-theta,T]
    r_lag: list  # K paths, (d,d) on [0,T+theta], zero tail
    g: np.ndarray  # (n,n)
    gamma: np.ndarray  # (n,n)
    # initial data
    xi: list  # K InitialLaw
    x0: CoefficientPath  # (n,) on [-delta,0)
    u0: CoefficientPath  # (d,) on [-theta,0)
    name: str = "scenario"

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self._check_structure()

    def _check_structure(self):
        K, n, d = self.K, self.n, self.d
        if len(self.pi) != K:
            raise ScenarioStructureError("pi length != K")
        for name, lst, shape in (
            ("a", self.a, (n, n)),
            ("a_lag", self.a_lag, (n, n)),
            ("r", self.r, (d, d)),
            ("r_lag", self.r_lag, (d, d)),
        ):
            if len(lst) != K:
                raise ScenarioStructureError(f"{name} must have one path per type")
            for k, p in enumerate(lst):
                if p.shape != shape:
                    raise ScenarioStructureError(f"{name}[{k}] has shape {p.shape}, expected {shape}")
        for name, p, shape in (
            ("a_mix", self.a_mix, (n, n)),
            ("b", self.b, (n, d)),
            ("b_lag", self.b_lag, (n, d)),
            ("b_mix", self.b_mix, (n, d)),
            ("d_g", self.d_g, (n, d)),
            ("d_lag", self.d_lag, (n, d)),
            ("q", self.q, (n, n)),
            ("q_lag", self.q_lag, (n, n)),
            ("s", self.s, (n, n)),
            ("s_lag", self.s_lag, (n, n)),
            ("x0", self.x0, (n,)),
            ("u0", self.u0, (d,)),
        ):
            if p.shape != shape:
                raise ScenarioStructureError(f"{name} has shape {p.shape}, expected {shape}")
        if self.g.shape != (n, n) or self.gamma.shape != (n, n):
            raise ScenarioStructureError("terminal weights must be n x n")
        if len(self.xi) != K:
            raise ScenarioStructureError("xi must have one law per type")
        for k, law in enumerate(self.xi):
            if law.mean.shape != (n,) or law.cov.shape != (n, n):
                raise ScenarioStructureError(f"xi[{k}] has wrong dimensions")

    def scaled(self, s: float, include_mixers: bool = False) -> "Scenario":
        """Scale every dynamics/weight matrix by s (mixing matrices S, S-lag,
        Gamma held fixed unless requested)."""
        sc = Scenario(
            K=self.K, n=self.n, d=self.d, T=self.T, delta=self.delta, theta=self.theta,
            pi=self.pi.copy(),
            a=[p.scaled(s) for p in self.a],
            a_lag=[p.scaled(s) for p in self.a_lag],
            a_mix=self.a_mix.scaled(s),
            b=self.b.scaled(s), b_lag=self.b_lag.scaled(s), b_mix=self.b_mix.scaled(s),
            d_g=self.d_g.scaled(s), d_lag=self.d_lag.scaled(s),
            q=self.q.scaled(s), q_lag=self.q_lag.scaled(s),
            s=self.s.scaled(s) if include_mixers else self.s,
            s_lag=self.s_lag.scaled(s) if include_mixers else self.s_lag,
            r=[p.scaled(s) for p in self.r],
            r_lag=[p.scaled(s) for p in self.r_lag],
            g=self.g * s,
            gamma=self.gamma * s if include_mixers else self.gamma,
            xi=self.xi, x0=self.x0, u0=self.u0, name=self.name,
        )
        return sc


# ---------------------------------------------------------------------------
# validation against the standing assumptions
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    time: float | None = None
    value: float | None = None


@dataclass
class ValidationReport:
    ok: bool
    checks: list

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            mark = "pass" if c.passed else "FAIL"
            extra = f" ({c.detail})" if c.detail and not c.passed else ""
            lines.append(f"[{mark}] {c.name}{extra}")
        return "\n".join(lines)


def _sym_defect(m: np.ndarray) -> float:
    return float(np.max(np.abs(m - m.T)))


def _min_eig(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])


def validate_scenario(sc: Scenario, r_min: float = 1e-8) -> ValidationReport:
    """Check the population-mix, data, boundedness, and cost-weight assumptions.

    Structural problems (wrong shapes) raise at construction; this report only
    covers the model assumptions, one entry per check with the violating
    breakpoint time where applicable.
    """
    if r_min <= 0:
        raise ValueError("r_min must be positive")
    checks: list[CheckResult] = []

    # mixing vector
    pi_ok = bool(np.all(sc.pi > 0))
    checks.append(CheckResult("A1.positive-mass", pi_ok,
                              "" if pi_ok else f"min pi = {sc.pi.min():.3g}"))
    ssum = float(np.sum(sc.pi))
    sum_ok = abs(ssum - 1.0) <= 1e-12
    checks.append(CheckResult("A1.sums-to-one", sum_ok,
                              "" if sum_ok else f"sum pi = {ssum!r}"))

    # initial data
    for k, law in enumerate(sc.xi):
        cov_ok = _sym_defect(law.cov) <= 1e-10 and _min_eig(law.cov) >= -1e-10
        checks.append(CheckResult(f"A2.xi[{k}]-covariance", cov_ok))
    hist_ok = True
    if sc.delta > 0:
        hist_ok = hist_ok and sc.x0.times[0] <= -sc.delta + 1e-9
    if sc.theta > 0:
        hist_ok = hist_ok and sc.u0.times[0] <= -sc.theta + 1e-9
    checks.append(CheckResult("A2.history-coverage", bool(hist_ok)))

    # boundedness of dynamics coefficients over their windows
    def finite(path: CoefficientPath, name: str, lo: float, hi: float):
        ok = bool(np.all(np.isfinite(path.values)))
        cover = path.times[0] <= lo + 1e-9
        checks.append(CheckResult(f"A3.{name}-bounded", ok and cover,
                                  "" if ok and cover else "non-finite values or window not covered"))

    for k in range(sc.K):
        finite(sc.a[k], f"A[{k}]", 0.0, sc.T)
        finite(sc.a_lag[k], f"A-lag[{k}]", 0.0, sc.T + sc.delta)
    finite(sc.a_mix, "A-mix", 0.0, sc.T + sc.delta)
    finite(sc.b, "B", -sc.theta, sc.T)
    finite(sc.b_lag, "B-lag", 0.0, sc.T + sc.theta)
    finite(sc.b_mix, "B-mix", 0.0, sc.T + sc.theta)
    finite(sc.d_g, "D", -sc.theta, sc.T)
    finite(sc.d_lag, "D-lag", 0.0, sc.T + sc.theta)

    # cost weights
    def check_weight(path: CoefficientPath, name: str, lo: float, hi: float,
                     psd: bool, strict: bool, tail_after: float | None):
        for t in path.probe_times(lo, min(hi, tail_after if tail_after is not None else hi)):
            if tail_after is not None and t > tail_after + _TOL:
                continue
            m = path.eval(t)
            if _sym_defect(m) > 1e-10 * (1.0 + np.abs(m).max()):
                checks.append(CheckResult(f"A4.{name}-symmetric", False, f"asymmetric at t={t}", time=t))
                return
            ev = _min_eig(m)
            if strict and ev < r_min:
                checks.append(CheckResult(f"A4.{name}-positive", False,
                                          f"min eig {ev:.3g} < r_min at t={t}", time=t, value=ev))
                return
            if psd and ev < -1e-10:
                checks.append(CheckResult(f"A4.{name}-psd", False,
                                          f"min eig {ev:.3g} at t={t}", time=t, value=ev))
                return
        checks.append(CheckResult(f"A4.{name}-ok", True))
        if tail_after is not None:
            probes = [tail_after * (1 + 1e-12) + 1e-9]
            probes += [float(t) for t in path.times if t > tail_after + _TOL]
            probes += [hi]
            for t in probes:
                if t <= tail_after + _TOL or t > hi + 1e-9:
                    continue
                m = path.eval(t)
                if np.abs(m).max() > _TOL:
                    checks.append(CheckResult(f"A4.{name}-tail-zero", False,
                                              f"nonzero on the post-horizon tail at t={t}", time=t))
                    return
            checks.append(CheckResult(f"A4.{name}-tail-zero", True))

    check_weight(sc.q, "Q", 0.0, sc.T, psd=True, strict=False, tail_after=None)
    check_weight(sc.q_lag, "Q-lag", 0.0, sc.T + sc.delta, psd=True, strict=False, tail_after=sc.T)
    for k in range(sc.K):
        check_weight(sc.r[k], f"R[{k}]", -sc.theta, sc.T, psd=False, strict=True, tail_after=None)
        check_weight(sc.r_lag[k], f"R-lag[{k}]", 0.0, sc.T + sc.theta, psd=False, strict=True, tail_after=sc.T)
    s_lag_tail_ok = True
    for t in [sc.T * (1 + 1e-12) + 1e-9] + [float(t) for t in sc.s_lag.times if t > sc.T + _TOL]:
        if t > sc.T + sc.delta + 1e-9:
            continue
        if np.abs(sc.s_lag.eval(t)).max() > _TOL:
            s_lag_tail_ok = False
            break
    if sc.delta > 0:
        checks.append(CheckResult("A4.S-lag-tail-zero", s_lag_tail_ok))
    g_ok = _sym_defect(sc.g) <= 1e-10 * (1.0 + np.abs(sc.g).max()) and _min_eig(sc.g) >= -1e-10
    checks.append(CheckResult("A4.G-psd", bool(g_ok)))

    ok = all(c.passed for c in checks)
    return ValidationReport(ok=ok, checks=checks)


# ---------------------------------------------------------------------------
# empirical type mixes
# ---------------------------------------------------------------------------


@dataclass
class MixReport:
    N: int
    pi: np.ndarray
    pi_N: np.ndarray
    eps_N: float
    assignment: np.ndarray  # type index per agent
    counts: np.ndarray

    def agents_of_type(self, k: int) -> np.ndarray:
        return np.nonzero(self.assignment == k)[0]


def empirical_mix(N: int, pi, policy: str = "exact-proportion", seed: int = 0) -> MixReport:
    """Assign N agents to types.

    ``exact-proportion`` uses largest-remainder rounding of N*pi (ties broken
    toward the lower type index); ``iid-sample`` draws types independently.
    """
    pi = np.asarray(pi, dtype=float)
    K = len(pi)
    if N < 1:
        raise ValueError("N must be at least 1")
    if policy == "exact-proportion":
        raw = N * pi
        counts = np.floor(raw).astype(int)
        rem = raw - counts
        short = N - counts.sum()
        # stable sort on (-remainder, index): lower index wins ties
        order = np.lexsort((np.arange(K), -rem))
        for j in range(short):
            counts[order[j]] += 1
    elif policy.startswith("iid-sample"):
        rng = np.random.Generator(np.random.Philox(key=seed))
        draws = rng.choice(K, size=N, p=pi)
        counts = np.bincount(draws, minlength=K)
    else:
        raise ValueError(f"unknown mix policy {policy!r}")
    assignment = np.repeat(np.arange(K), counts)
    pi_N = counts / N
    eps_N = float(np.max(np.abs(pi_N - pi)))
    return MixReport(N=N, pi=pi, pi_N=pi_N, eps_N=eps_N, assignment=assignment, counts=counts)


# ---------------------------------------------------------------------------
# derived coefficient tables
# ---------------------------------------------------------------------------


@dataclass
class Table:
    """Array of per-grid-index matrices with an explicit lowest index."""

    arr: np.ndarray  # (P, *shape)
    lo: int

    def at(self, i: int) -> np.ndarray:
        j = i - self.lo
        if j < 0 or j >= self.arr.shape[0]:
            raise IndexError(f"table index {i} outside [{self.lo}, {self.lo + self.arr.shape[0] - 1}]")
        return self.arr[j]


def _tabulate(path: CoefficientPath, grid: TimeGrid, lo: int, hi: int) -> Table:
    arr = np.stack([path.eval(i * grid.h) for i in range(lo, hi + 1)])
    return Table(arr=arr, lo=lo)


@dataclass
class DerivedCoeffs:
    """All coefficient tables the solvers read, tabulated on one grid."""

    sc: Scenario
    grid: TimeGrid
    # dynamics
    a: list  # per type, [0, S]
    a_lag: list  # per type, [0, S+m_delta]
    a_mix: Table  # [0, S+m_delta]
    b: Table  # [-m_theta, S]
    b_lag: Table  # [0, S+m_theta]
    b_mix: Table  # [0, S+m_theta]
    d_g: Table  # [-m_theta, S]
    d_lag: Table  # [0, S+m_theta]
    # weights
    q: Table
    q_lag: Table
    s: Table
    s_lag: Table
    r: list  # [-m_theta, S]
    r_lag: list  # [0, S+m_theta]
    # effective/derived
    r_eff: list  # R_k(t) + R-lag_k(t+theta), [-m_theta, S]
    r_eff_inv: list
    q_eff: Table  # Q(t) + Q-lag(t+delta), [0, S]
    s_now: Table  # QS + S'Q - S'QS at t, [0, S]
    s_lag_w: Table  # delayed analogue at its own time, [0, S+m_delta]
    s_cross: Table  # s_now(t) + s_lag_w(t+delta), [0, S]
    g_cross: np.ndarray  # G Gamma + Gamma' G - Gamma' G Gamma
    # quadratic-form coefficient products, [0, S] each, per type
    bprod: list  # list over types of dict index 1..14
    dprod: list  # dict index 1..10
    # histories tabulated
    x0_hist: np.ndarray  # (history_len, n) at indices [-hist, -1]
    u0_hist: np.ndarray  # (history_len, d)

    @property
    def mask_delta(self) -> np.ndarray:
        from .grid import window_mask

        return window_mask(self.grid, "[0,T-delta]")

    @property
    def mask_theta(self) -> np.ndarray:
        from .grid import window_mask

        return window_mask(self.grid, "[0,T-theta]")


def _history_values(path: CoefficientPath, grid: TimeGrid, m_lag: int, dim: int) -> np.ndarray:
    """History at indices [-history_len, -1]; slots before the path's window
    repeat its earliest value."""
    hl = grid.history_len
    out = np.zeros((hl, dim))
    for j, idx in enumerate(range(-hl, 0)):
        t = max(idx, -m_lag) * grid.h if m_lag > 0 else path.times[0]
        out[j] = path.eval(max(t, path.times[0]))
    return out


def derived_coefficients(sc: Scenario, grid: TimeGrid) -> DerivedCoeffs:
    """Tabulate every coefficient and derived product on the grid.

    Pure and deterministic: equal inputs produce bit-identical tables.
    """
    S, md, mt = grid.steps, grid.m_delta, grid.m_theta
    a = [_tabulate(sc.a[k], grid, 0, S) for k in range(sc.K)]
    a_lag = [_tabulate(sc.a_lag[k], grid, 0, S + md) for k in range(sc.K)]
    a_mix = _tabulate(sc.a_mix, grid, 0, S + md)
    b = _tabulate(sc.b, grid, -mt, S)
    b_lag = _tabulate(sc.b_lag, grid, 0, S + mt)
    b_mix = _tabulate(sc.b_mix, grid, 0, S + mt)
    d_g = _tabulate(sc.d_g, grid, -mt, S)
    d_lag = _tabulate(sc.d_lag, grid, 0, S + mt)
    q = _tabulate(sc.q, grid, 0, S)
    q_lag = _tabulate(sc.q_lag, grid, 0, S + md)
    s_tab = _tabulate(sc.s, grid, 0, S)
    s_lag = _tabulate(sc.s_lag, grid, 0, S + md)
    r = [_tabulate(sc.r[k], grid, -mt, S) for k in range(sc.K)]
    r_lag = [_tabulate(sc.r_lag[k], grid, 0, S + mt) for k in range(sc.K)]

    r_eff, r_eff_inv = [], []
    for k in range(sc.K):
        arr = np.empty_like(r[k].arr)
        inv = np.empty_like(arr)
        for j, i in enumerate(range(-mt, S + 1)):
            m = r[k].at(i) + r_lag[k].at(i + mt)
            arr[j] = m
            try:
                inv[j] = np.linalg.inv(m)
            except np.linalg.LinAlgError as e:
                raise DefinitenessError(f"effective control weight singular at t={i * grid.h}") from e
        r_eff.append(Table(arr, -mt))
        r_eff_inv.append(Table(inv, -mt))

    q_eff_arr = np.stack([q.at(i) + q_lag.at(i + md) for i in range(0, S + 1)])
    q_eff = Table(q_eff_arr, 0)

    def cross(qm, sm):
        return qm @ sm + sm.T @ qm - sm.T @ qm @ sm

    s_now = Table(np.stack([cross(q.at(i), s_tab.at(i)) for i in range(0, S + 1)]), 0)
    s_lag_w = Table(np.stack([cross(q_lag.at(i), s_lag.at(i)) for i in range(0, S + md + 1)]), 0)
    s_cross = Table(np.stack([s_now.at(i) + s_lag_w.at(i + md) for i in range(0, S + 1)]), 0)
    g_cross = sc.g @ sc.gamma + sc.gamma.T @ sc.g - sc.gamma.T @ sc.g @ sc.gamma

    bprod, dprod = [], []
    for k in range(sc.K):
        rows_b = {i: [] for i in range(1, 15)}
        rows_d = {i: [] for i in range(1, 11)}
        for i in range(0, S + 1):
            Bi, Di = b.at(i), d_g.at(i)
            Bl_adv, Bm_adv, Dl_adv = b_lag.at(i + mt), b_mix.at(i + mt), d_lag.at(i + mt)
            Bl_now, Bm_now, Dl_now = b_lag.at(i), b_mix.at(i), d_lag.at(i)
            B_prev, D_prev = b.at(i - mt), d_g.at(i - mt)
            Ri = r_eff_inv[k].at(i)
            R_prev = r_eff_inv[k].at(i - mt)
            rows_b[1].append(Bi @ Ri @ Bi.T)
            rows_b[2].append(Bm_now @ R_prev @ B_prev.T)
            rows_b[3].append(Di @ Ri @ Bi.T)
            rows_b[4].append(Dl_now @ R_prev @ B_prev.T)
            rows_b[5].append(Bi @ Ri @ Bl_adv.T)
            rows_b[6].append(Bl_now @ R_prev @ B_prev.T)
            rows_b[7].append(Bl_now @ R_prev @ Bl_now.T)
            rows_b[8].append(Bm_now @ R_prev @ Bl_now.T)
            rows_b[9].append(Di @ Ri @ Bl_adv.T)
            rows_b[10].append(Dl_now @ R_prev @ Bl_now.T)
            rows_b[11].append(Bi @ Ri @ Bm_adv.T)
            rows_b[12].append(Bl_now @ R_prev @ Bm_now.T)
            rows_b[13].append(Di @ Ri @ Bm_adv.T)
            rows_b[14].append(Dl_now @ R_prev @ Bm_now.T)
            rows_d[1].append(Bi @ Ri @ Di.T)
            rows_d[2].append(Bi @ Ri @ Dl_adv.T)
            rows_d[3].append(Bm_now @ R_prev @ D_prev.T)
            rows_d[4].append(Bm_now @ R_prev @ Dl_now.T)
            rows_d[5].append(Di @ Ri @ Di.T)
            rows_d[6].append(Di @ Ri @ Dl_adv.T)
            rows_d[7].append(Dl_now @ R_prev @ D_prev.T)
            rows_d[8].append(Dl_now @ R_prev @ Dl_now.T)
            rows_d[9].append(Bl_now @ R_prev @ D_prev.T)
            rows_d[10].append(Bl_now @ R_prev @ Dl_now.T)
        bprod.append({i: Table(np.stack(rows_b[i]), 0) for i in rows_b})
        dprod.append({i: Table(np.stack(rows_d[i]), 0) for i in rows_d})

    x0_hist = _history_values(sc.x0, grid, md, sc.n)
    u0_hist = _history_values(sc.u0, grid, mt, sc.d)

    return DerivedCoeffs(
        sc=sc, grid=grid, a=a, a_lag=a_lag, a_mix=a_mix, b=b, b_lag=b_lag, b_mix=b_mix,
        d_g=d_g, d_lag=d_lag, q=q, q_lag=q_lag, s=s_tab, s_lag=s_lag, r=r, r_lag=r_lag,
        r_eff=r_eff, r_eff_inv=r_eff_inv, q_eff=q_eff, s_now=s_now, s_lag_w=s_lag_w,
        s_cross=s_cross, g_cross=g_cross, bprod=bprod, dprod=dprod,
        x0_hist=x0_hist, u0_hist=u0_hist,
    )


# ---------------------------------------------------------------------------
# stacked block matrices and their norms
# ---------------------------------------------------------------------------


@dataclass
class NormBundle:
    rho1_star: float
    rho2_star: float
    k: np.ndarray  # k[0..31]; entries 20..31 are the (un-squared) norms
    k0_prime: float

    def as_dict(self) -> dict:
        return {
            "rho1_star": self.rho1_star,
            "rho2_star": self.rho2_star,
            "k0_prime": self.k0_prime,
            **{f"k{i}": float(self.k[i]) for i in range(32)},
        }


def _block(K_rows: int, K_cols: int, n: int, entries) -> np.ndarray:
    """Assemble a block matrix from {(row, col): (n, n) matrix}."""
    out = np.zeros((K_rows * n, K_cols * n))
    for (r, c), m in entries.items():
        out[r * n : (r + 1) * n, c * n : (c + 1) * n] = m
    return out


def _spec_norm(m: np.ndarray) -> float:
    if m.size == 0 or not np.any(m):
        return 0.0
    return float(np.linalg.norm(m, 2))


def block_norms(sc: Scenario, grid: TimeGrid) -> NormBundle:
    """Spectral norms (sup over grid times) of the stacked coefficient blocks.

    The stacked forward state has one block per type; the stacked backward
    state has three (adjoint, peer adjoint, mean correction).
    """
    dc = derived_coefficients(sc, grid)
    K, n = sc.K, sc.n
    S = grid.steps
    pi = sc.pi

    sup = {i: 0.0 for i in range(32)}
    k0p = 0.0
    rho1 = -np.inf
    rho2 = -np.inf

    for i in range(0, S + 1):
        A = _block(K, K, n, {(k, k): dc.a[k].at(i) for k in range(K)})
        Ahat = _block(K, K, n, {(k, k): dc.a_lag[k].at(i) for k in range(K)})
        Amix1 = _block(K, K, n, {(r, c): pi[c] * dc.a_mix.at(i) for r in range(K) for c in range(K)})
        At_adv = dc.a_mix.at(i + grid.m_delta).T
        # advanced-coupling block: adjoint and mean-correction rows read the
        # peer-adjoint and mean-correction columns
        ent = {}
        for r in range(K):
            for c in range(K):
                ent[(r, K + c)] = pi[c] * At_adv
                ent[(r, 2 * K + c)] = pi[c] * At_adv
                ent[(2 * K + r, K + c)] = pi[c] * At_adv
                ent[(2 * K + r, 2 * K + c)] = pi[c] * At_adv
        Amix2 = _block(3 * K, 3 * K, n, ent)
        Ahat_adv = _block(3 * K, 3 * K, n, {(j * K + k, j * K + k): dc.a_lag[k].at(i + grid.m_delta).T
                                            for j in range(3) for k in range(K)})
        Acal = _block(3 * K, 3 * K, n, {(j * K + k, j * K + k): dc.a[k].at(i).T
                                        for j in range(3) for k in range(K)})

        bp, dp = dc.bprod, dc.dprod
        B1 = _block(K, 3 * K, n, {(k, k): bp[k][1].at(i) for k in range(K)})
        B2 = _block(K, 3 * K, n, {(k, k): bp[k][5].at(i) for k in range(K)})
        B3 = _block(K, 3 * K, n, {(k, k): bp[k][6].at(i) for k in range(K)})
        B4 = _block(K, 3 * K, n, {(k, k): bp[k][7].at(i) for k in range(K)})
        B1pi = _block(K, 3 * K, n, {(r, c): pi[c] * bp[c][2].at(i) for r in range(K) for c in range(K)})
        ent = {}
        for r in range(K):
            for c in range(K):
                ent[(r, c)] = -pi[c] * bp[c][8].at(i)
                ent[(r, K + c)] = pi[c] * bp[r][12].at(i)
                ent[(r, 2 * K + c)] = pi[c] * bp[r][12].at(i)
        B2pi = _block(K, 3 * K, n, ent)
        B3pi = _block(K, 3 * K, n, {(r, K * (1 + j) + c): pi[c] * bp[r][11].at(i)
                                    for r in range(K) for c in range(K) for j in range(2)})
        B4pi = _block(K, 3 * K, n, {(r, K * (1 + j) + c): pi[c] * bp[r][13].at(i)
                                    for r in range(K) for c in range(K) for j in range(2)})
        B5pi = _block(K, 3 * K, n, {(r, K * (1 + j) + c): pi[c] * bp[r][14].at(i)
                                    for r in range(K) for c in range(K) for j in range(2)})
        B5 = _block(K, 3 * K, n, {(k, k): bp[k][3].at(i) for k in range(K)})
        B6 = _block(K, 3 * K, n, {(k, k): bp[k][4].at(i) for k in range(K)})
        B7 = _block(K, 3 * K, n, {(k, k): bp[k][9].at(i) for k in range(K)})
        B8 = _block(K, 3 * K, n, {(k, k): bp[k][10].at(i) for k in range(K)})

        D1 = _block(K, 3 * K, n, {(k, k): dp[k][1].at(i) for k in range(K)})
        D2 = _block(K, 3 * K, n, {(k, k): dp[k][2].at(i) for k in range(K)})
        D3 = _block(K, 3 * K, n, {(k, k): dp[k][9].at(i) for k in range(K)})
        D4 = _block(K, 3 * K, n, {(k, k): dp[k][10].at(i) for k in range(K)})
        D5 = _block(K, 3 * K, n, {(k, k): dp[k][5].at(i) for k in range(K)})
        D6 = _block(K, 3 * K, n, {(k, k): dp[k][7].at(i) for k in range(K)})
        D7 = _block(K, 3 * K, n, {(k, k): dp[k][6].at(i) for k in range(K)})
        D8 = _block(K, 3 * K, n, {(k, k): dp[k][8].at(i) for k in range(K)})
        D1pi = _block(K, 3 * K, n, {(r, c): pi[c] * dp[c][3].at(i) for r in range(K) for c in range(K)})
        D2pi = _block(K, 3 * K, n, {(r, c): pi[c] * dp[c][4].at(i) for r in range(K) for c in range(K)})

        Qb = _block(3 * K, K, n, {(j * K + k, k): dc.q_eff.at(i) for j in range(2) for k in range(K)})
        Spi = _block(3 * K, K, n, {(j * 2 * K + r, c): pi[c] * dc.s_cross.at(i)
                                   for j in range(2) for r in range(K) for c in range(K)})

        rho1 = max(rho1, float(np.linalg.eigvalsh(0.5 * (A + A.T))[-1]))
        rho2 = max(rho2, float(np.linalg.eigvalsh(0.5 * (Acal + Acal.T))[-1]))
        k0p = max(k0p, _spec_norm(Acal))
        for idx, m in ((0, A), (1, Ahat), (2, Amix1), (3, B1), (4, B3), (5, B2pi), (6, B1pi),
                       (7, B2), (8, B3pi), (9, B4), (10, D1), (11, D3), (12, D2pi), (13, D1pi),
                       (14, D2), (15, D4), (16, Qb), (17, Spi), (18, Amix2), (19, Ahat_adv),
                       (20, B5), (21, B6), (22, B7), (23, B8), (24, B4pi), (25, B5pi),
                       (26, D5), (27, D6), (28, D7), (29, D8)):
            sup[idx] = max(sup[idx], _spec_norm(m))

    Gb = _block(3 * K, K, n, {(j * K + k, k): sc.g for j in range(2) for k in range(K)})
    Gpi = _block(3 * K, K, n, {(j * 2 * K + r, c): pi[c] * dc.g_cross
                               for j in range(2) for r in range(K) for c in range(K)})
    sup[30] = _spec_norm(Gb)
    sup[31] = _spec_norm(Gpi)

    k = np.array([sup[i] for i in range(32)])
    return NormBundle(rho1_star=rho1, rho2_star=rho2, k=k, k0_prime=k0p)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _path_from_spec(spec, shape: tuple, start: float, zero_after: float | None = None) -> CoefficientPath:
    if isinstance(spec, dict):
        times = spec["times"]
        values = [np.reshape(np.asarray(v, dtype=float), shape) for v in spec["values"]]
        za = spec.get("zero_after", None)
        return CoefficientPath(np.asarray(times, dtype=float), np.stack(values), za)
    v = np.reshape(np.asarray(spec, dtype=float), shape)
    return CoefficientPath.constant(v, start=start, zero_after=zero_after)


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        K, n, d = int(doc["K"]), int(doc["n"]), int(doc["d"])
        T, delta, theta = float(doc["T"]), float(doc["delta"]), float(doc["theta"])
        dyn, cost, init = doc["dynamics"], doc["cost"], doc["initial"]

        def per_type(specs, shape, start, zero_after=None):
            if not isinstance(specs, list):
                raise ScenarioStructureError("per-type coefficient must be a list of K entries")
            if len(specs) != K:
                raise ScenarioStructureError(f"expected {K} per-type entries, got {len(specs)}")
            return [_path_from_spec(s, shape, start, zero_after) for s in specs]

        xi = []
        for law in init["xi"]:
            kind = law.get("kind", "gaussian")
            mean = np.reshape(np.asarray(law["mean"], dtype=float), (n,))
            cov = law.get("cov", np.zeros((n, n)))
            xi.append(InitialLaw(kind=kind, mean=mean, cov=np.reshape(np.asarray(cov, dtype=float), (n, n))))

        sc = Scenario(
            K=K, n=n, d=d, T=T, delta=delta, theta=theta,
            pi=np.asarray(doc["pi"], dtype=float),
            a=per_type(dyn["A"], (n, n), 0.0),
            a_lag=per_type(dyn["A_lag"], (n, n), 0.0),
            a_mix=_path_from_spec(dyn["A_mix"], (n, n), 0.0),
            b=_path_from_spec(dyn["B"], (n, d), -theta),
            b_lag=_path_from_spec(dyn["B_lag"], (n, d), 0.0),
            b_mix=_path_from_spec(dyn["B_mix"], (n, d), 0.0),
            d_g=_path_from_spec(dyn["D"], (n, d), -theta),
            d_lag=_path_from_spec(dyn["D_lag"], (n, d), 0.0),
            q=_path_from_spec(cost["Q"], (n, n), 0.0),
            q_lag=_path_from_spec(cost["Q_lag"], (n, n), 0.0, zero_after=T),
            s=_path_from_spec(cost["S"], (n, n), 0.0),
            s_lag=_path_from_spec(cost["S_lag"], (n, n), 0.0, zero_after=T),
            r=per_type(cost["R"], (d, d), -theta),
            r_lag=per_type(cost["R_lag"], (d, d), 0.0, zero_after=T),
            g=np.reshape(np.asarray(cost["G"], dtype=float), (n, n)),
            gamma=np.reshape(np.asarray(cost["Gamma"], dtype=float), (n, n)),
            xi=xi,
            x0=_path_from_spec(init.get("x0", np.zeros(n)), (n,), -delta if delta > 0 else 0.0),
            u0=_path_from_spec(init.get("u0", np.zeros(d)), (d,), -theta if theta > 0 else 0.0),
            name=str(doc.get("name", "scenario")),
        )
        return sc
    except ScenarioStructureError:
        raise
    except KeyError as e:
        raise ScenarioStructureError(f"missing scenario key: {e}") from e
    except (ValueError, TypeError) as e:
        raise ScenarioStructureError(f"malformed scenario: {e}") from e


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "name": sc.name,
        "K": sc.K, "n": sc.n, "d": sc.d,
        "T": sc.T, "delta": sc.delta, "theta": sc.theta,
        "pi": sc.pi.tolist(),
        "dynamics": {
            "A": [p.to_spec() for p in sc.a],
            "A_lag": [p.to_spec() for p in sc.a_lag],
            "A_mix": sc.a_mix.to_spec(),
            "B": sc.b.to_spec(), "B_lag": sc.b_lag.to_spec(), "B_mix": sc.b_mix.to_spec(),
            "D": sc.d_g.to_spec(), "D_lag": sc.d_lag.to_spec(),
        },
        "cost": {
            "Q": sc.q.to_spec(), "Q_lag": sc.q_lag.to_spec(),
            "S": sc.s.to_spec(), "S_lag": sc.s_lag.to_spec(),
            "R": [p.to_spec() for p in sc.r], "R_lag": [p.to_spec() for p in sc.r_lag],
            "G": sc.g.tolist(), "Gamma": sc.gamma.tolist(),
        },
        "initial": {
            "xi": [{"kind": law.kind, "mean": law.mean.tolist(), "cov": law.cov.tolist()} for law in sc.xi],
            "x0": sc.x0.to_spec(),
            "u0": sc.u0.to_spec(),
        },
    }


def canonical_json(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), sort_keys=True, separators=(",", ":"))


def scenario_hash(sc: Scenario, extra: dict | None = None) -> str:
    payload = canonical_json(sc)
    if extra:
        payload += json.dumps(extra, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_scenario(path: str) -> Scenario:
    with open(path) as f:
        if path.endswith(".json"):
            doc = json.load(f)
        else:
            doc = yaml.safe_load(f)
    return scenario_from_dict(doc)


def save_scenario(path: str, sc: Scenario) -> None:
    with open(path, "w") as f:
        if path.endswith(".json"):
            json.dump(scenario_to_dict(sc), f, indent=1, sort_keys=True)
        else:
            yaml.safe_dump(scenario_to_dict(sc), f, sort_keys=False)
