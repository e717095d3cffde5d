"""Discounting certificate for the consistency-condition fixed point.

From the stacked block norms the certificate solves the two transcendental
root equations ``lam + c*exp(lam*delta) = rhs`` (strictly increasing left
side, so bracketing plus Newton polish finds the unique root), selects the
discount, and evaluates an explicit contraction modulus.  Two branches:

* horizon-free: requires the delay-adjusted stability margin L < 0, picks
  the discount so both shifted rates are positive, and bounds the map with
  a T-independent product;
* horizon-bound: always available, picks the discount so the forward rate
  is at least one and the backward rate nonpositive, and bounds the map
  with a T-dependent product.

A failing certificate is a valid outcome; the condition is sufficient only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .grid import TimeGrid
from .scenario import NormBundle, Scenario, block_norms, scenario_hash

__all__ = [
    "solve_discount_root",
    "compute_L",
    "Certificate",
    "certify",
    "DEFAULT_L_MULTS",
]

DEFAULT_L_MULTS = (1.0, 10.0, 100.0, 1e3, 1e4)


def solve_discount_root(c: float, delta: float, rhs: float, tol: float = 1e-14) -> float:
    """Unique root of g(lam) = lam + c*exp(lam*delta) = rhs for c, delta >= 0.

    g is a strictly increasing bijection of the reals (affine shift when
    c*delta = 0), so a sign-change bracket always exists; bisection narrows
    it and Newton polishes to residual <= 1e-12.
    """
    if c < 0 or delta < 0:
        raise ValueError("c and delta must be nonnegative")
    if c == 0.0 or delta == 0.0:
        return rhs - c  # g(lam) = lam + c

    def g(lam: float) -> float:
        return lam + c * math.exp(min(lam * delta, 700.0))

    lo, hi = -1.0, 1.0
    while g(lo) > rhs:
        lo *= 2.0
        if lo < -1e18:
            raise ArithmeticError("bracketing failed on the left")
    while g(hi) < rhs:
        hi *= 2.0
        if hi > 1e18:
            raise ArithmeticError("bracketing failed on the right")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) <= rhs:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(lo)):
            break
    lam = 0.5 * (lo + hi)
    for _ in range(8):  # Newton polish
        val = g(lam) - rhs
        dg = 1.0 + c * delta * math.exp(min(lam * delta, 700.0))
        step = val / dg
        lam -= step
        if abs(step) < 1e-16 * max(1.0, abs(lam)):
            break
    return lam


def compute_L(norms: NormBundle, delta: float) -> float:
    """Delay-adjusted stability margin of the coupled system.

    Combines the drift monotonicity rates with the delayed/advanced own-term
    norms; a negative value is the entry ticket to the horizon-free branch.
    """
    k = norms.k
    r1, r2 = norms.rho1_star, norms.rho2_star
    a = k[1] + k[2]
    b = k[18] + k[19]
    return float(2.0 * (r1 + r2) + a + b
                 + a * math.exp(min(-(2.0 * r1 + a) * delta, 700.0))
                 + b * math.exp(min(-(2.0 * r2 + b) * delta, 700.0)))


def _seed_weights(k: np.ndarray, mult: float) -> np.ndarray:
    """l-weights 1..15 seeded at the matching block norms, scaled jointly."""
    l = np.ones(16)  # 1-indexed
    for j in range(1, 14):
        l[j] = mult * k[j + 2] if k[j + 2] > 0 else 1.0
    l[14] = mult * k[16] if k[16] > 0 else 1.0
    l[15] = mult * k[17] if k[17] > 0 else 1.0
    return l


def _rhs1(k: np.ndarray, rho1: float, l: np.ndarray) -> float:
    s = sum(k[j + 2] / l[j] for j in range(1, 14))
    return -2.0 * rho1 - (k[1] + k[2]) - s


def _rhs2(k: np.ndarray, rho2: float, l: np.ndarray) -> float:
    return -2.0 * rho2 - k[16] / l[14] - k[17] / l[15] - (k[18] + k[19])


def _cy_cz(k: np.ndarray, l: np.ndarray, lam1: float, theta: float) -> tuple:
    """Input-sensitivity factors of the forward map under the shifted norm."""
    e_minus = math.exp(min(lam1 * theta, 700.0))   # weights delayed reads
    e_plus = math.exp(min(-lam1 * theta, 700.0))   # weights advanced reads
    cy = (k[3] * l[1] + k[5] * l[3] + k[9] * l[7] + k[20] ** 2 + k[23] ** 2 + k[25] ** 2
          + (k[4] * l[2] + k[6] * l[4] + k[21] ** 2) * e_minus
          + (k[7] * l[5] + k[8] * l[6] + k[22] ** 2 + k[24] ** 2) * e_plus)
    cz = (k[10] * l[8] + k[12] * l[10] + k[15] * l[13] + k[26] ** 2 + k[29] ** 2
          + (k[11] * l[9] + k[13] * l[11] + k[27] ** 2) * e_minus
          + (k[14] * l[12] + k[28] ** 2) * e_plus)
    return cy, cz


def _modulus_free(k, l, rho_t1, rho_t2, cy, cz, theta) -> float:
    front = (1.0 + rho_t2) / rho_t2
    bracket = (k[30] ** 2 + k[31] ** 2
               + (k[16] * l[14] + k[17] * l[15]) * math.exp(min(rho_t1 * theta, 700.0)) / rho_t1)
    return front * bracket * max(cy, cz)


def _modulus_bound(k, l, rho_t1, rho_t2, cy, cz, theta, T) -> float:
    if abs(rho_t2) < 1e-12:
        f1 = T + 1.0
    else:
        f1 = (1.0 - math.exp(min(-rho_t2 * T, 700.0))) / rho_t2
        f1 += max(1.0, math.exp(min(-rho_t2 * T, 700.0))) / min(1.0, math.exp(min(-rho_t2 * T, 700.0)))
    if abs(rho_t1) < 1e-12:
        f2b = theta + T
    else:
        f2b = (math.exp(min(rho_t1 * theta, 700.0)) - math.exp(min(-rho_t1 * T, 700.0))) / rho_t1
    f2 = (k[30] ** 2 + k[31] ** 2) * max(1.0, math.exp(min(-rho_t1 * T, 700.0))) \
        + (k[16] * l[14] + k[17] * l[15]) * f2b
    return f1 * f2 * max(cy, cz)


@dataclass
class Certificate:
    norms: NormBundle
    l_weights: np.ndarray
    l_mult: float
    lam1: float
    lam2: float
    rho: float
    rho_tilde1: float
    rho_tilde2: float
    l_margin: float  # the delay-adjusted stability margin (negative on the free branch)
    branch: str  # "horizon-free" | "horizon-bound"
    modulus_sq: float  # contraction factor for squared norms
    passed: bool
    sc_hash: str = ""

    @property
    def modulus(self) -> float:
        return math.sqrt(max(self.modulus_sq, 0.0))

    def dominating_term(self) -> str:
        k = self.norms.k
        labels = {3: "own control gain", 16: "state weight", 17: "cross weight",
                  30: "terminal weight", 31: "terminal cross weight"}
        idx = max(labels, key=lambda i: k[i])
        return labels[idx]

    def to_dict(self) -> dict:
        return {
            "sc_hash": self.sc_hash,
            "passed": bool(self.passed),
            "branch": self.branch,
            "modulus": self.modulus,
            "modulus_sq": self.modulus_sq,
            "rho": self.rho,
            "rho_tilde1": self.rho_tilde1,
            "rho_tilde2": self.rho_tilde2,
            "lam1": self.lam1,
            "lam2": self.lam2,
            "l_margin": self.l_margin,
            "l_mult": self.l_mult,
            "l_weights": self.l_weights.tolist(),
            "norms": self.norms.as_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def certify(sc: Scenario, grid: TimeGrid, rho_override: float | None = None,
            l_weights: np.ndarray | None = None,
            l_mults: tuple = DEFAULT_L_MULTS) -> Certificate:
    """Build the discounting certificate for a scenario on a grid.

    With a negative stability margin, sweeps a joint multiplier on the
    l-weights until both shifted rates are positive and the horizon-free
    modulus is minimal; otherwise (or when that fails) falls back to the
    horizon-bound branch.  ``passed`` means the selected modulus is below
    one; a False result carries full diagnostics and is not an error.
    """
    norms = block_norms(sc, grid)
    k = norms.k
    delta = sc.delta
    Lval = compute_L(norms, delta)

    def roots_for(l):
        lam1 = solve_discount_root(k[1] + k[2], delta, _rhs1(k, norms.rho1_star, l))
        lam2 = solve_discount_root(k[18] + k[19], delta, _rhs2(k, norms.rho2_star, l))
        return lam1, lam2

    best = None
    if Lval < 0:
        candidates = [l_weights] if l_weights is not None else [_seed_weights(k, m) for m in l_mults]
        mults = [0.0] if l_weights is not None else list(l_mults)
        for l, m in zip(candidates, mults):
            lam1, lam2 = roots_for(l)
            if -lam1 >= lam2:
                continue
            rho = rho_override if rho_override is not None else 0.5 * (lam2 - lam1)
            rt1, rt2 = rho + lam1, -rho + lam2
            if rt1 <= 0 or rt2 <= 0:
                continue
            cy, cz = _cy_cz(k, l, lam1, sc.theta)
            mod = _modulus_free(k, l, rt1, rt2, cy, cz, sc.theta)
            if best is None or mod < best[0]:
                best = (mod, l, m, lam1, lam2, rho, rt1, rt2, "horizon-free")

    if best is None:
        l = l_weights if l_weights is not None else _seed_weights(k, 1.0)
        lam1, lam2 = roots_for(l)
        rho = rho_override if rho_override is not None else max(1.0 - lam1, lam2)
        rt1, rt2 = rho + lam1, -rho + lam2
        cy, cz = _cy_cz(k, l, lam1, sc.theta)
        mod = _modulus_bound(k, l, rt1, rt2, cy, cz, sc.theta, sc.T)
        best = (mod, l, 1.0, lam1, lam2, rho, rt1, rt2, "horizon-bound")

    mod, l, m, lam1, lam2, rho, rt1, rt2, branch = best
    return Certificate(
        norms=norms, l_weights=np.asarray(l), l_mult=m, lam1=lam1, lam2=lam2, rho=rho,
        rho_tilde1=rt1, rho_tilde2=rt2, l_margin=Lval, branch=branch,
        modulus_sq=mod, passed=bool(mod < 1.0), sc_hash=scenario_hash(sc),
    )
