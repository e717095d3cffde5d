"""Cross-sectional regression proxies for conditional expectations.

Backward solvers replace conditional expectations with per-step ridge
regressions of the targets on adapted features (a constant, the current
state, and the delayed state by default).  The intercept is fit exactly on
centered features, so projecting a deterministic target returns it unchanged
and cross-sectional means are preserved step by step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["CondExpOperator", "FittedMap", "RegressionSizeError", "fit_conditional_expectation"]


class RegressionSizeError(ValueError):
    """Fewer samples than regression columns."""


@dataclass
class FittedMap:
    """Affine-in-features evaluator produced by one regression."""

    kept: np.ndarray  # indices of retained (non-degenerate) feature columns
    center: np.ndarray
    scale: np.ndarray
    intercept: np.ndarray  # (dout,)
    coef: np.ndarray  # (n_kept_expanded, dout)
    degree: int
    r2: float = 1.0
    cond: float = 1.0

    def predict(self, features: np.ndarray) -> np.ndarray:
        phi = _expand(features[:, self.kept], self.degree)
        z = (phi - self.center) / self.scale
        return self.intercept[None, :] + z @ self.coef

    @classmethod
    def constant(cls, value: np.ndarray) -> "FittedMap":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(kept=np.array([], dtype=int), center=np.zeros(0), scale=np.ones(0),
                   intercept=v, coef=np.zeros((0, len(v))), degree=1)


def _expand(x: np.ndarray, degree: int) -> np.ndarray:
    """Powers 1..degree of each column (no cross terms)."""
    if degree <= 1 or x.shape[1] == 0:
        return x
    return np.hstack([x**p for p in range(1, degree + 1)])


@dataclass
class CondExpOperator:
    """Per-step least-squares conditional expectation with a ridge guard."""

    degree: int = 1
    ridge: float = 1e-10

    def fit(self, features: np.ndarray, targets: np.ndarray) -> FittedMap:
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        if targets.shape[0] == 1 and features.shape[0] != 1:
            targets = targets.T
        M = features.shape[0]
        if targets.shape[0] != M:
            raise ValueError("feature/target sample counts differ")

        # drop (nearly) constant columns; the intercept carries their content
        spread = features.max(axis=0) - features.min(axis=0) if M > 0 else np.zeros(features.shape[1])
        kept = np.nonzero(spread > 1e-13 * (1.0 + np.abs(features).max(initial=0.0)))[0]
        phi = _expand(features[:, kept], self.degree)
        ncol = phi.shape[1] + 1
        if M < ncol:
            raise RegressionSizeError(f"{M} samples for {ncol} regression columns")

        center = phi.mean(axis=0) if phi.shape[1] else np.zeros(0)
        spread2 = phi.std(axis=0) if phi.shape[1] else np.ones(0)
        scale = np.where(spread2 > 1e-300, spread2, 1.0)
        z = (phi - center) / scale
        intercept = targets.mean(axis=0)
        yc = targets - intercept[None, :]
        if phi.shape[1]:
            gram = z.T @ z + self.ridge * M * np.eye(z.shape[1])
            coef = np.linalg.solve(gram, z.T @ yc)
            cond = float(np.linalg.cond(gram))
        else:
            coef = np.zeros((0, targets.shape[1]))
            cond = 1.0
        resid = yc - (z @ coef if phi.shape[1] else 0.0)
        tot = float(np.sum(yc**2))
        r2 = 1.0 if tot <= 1e-300 else 1.0 - float(np.sum(resid**2)) / tot
        return FittedMap(kept=kept, center=center, scale=scale, intercept=intercept,
                         coef=coef, degree=self.degree, r2=r2, cond=cond)

    def fit_predict(self, features: np.ndarray, targets: np.ndarray) -> np.ndarray:
        return self.fit(features, targets).predict(features)


def fit_conditional_expectation(features: np.ndarray, targets: np.ndarray,
                                degree: int = 1, ridge: float = 1e-10) -> FittedMap:
    """One-shot ridge least squares; returns the fitted evaluator."""
    return CondExpOperator(degree=degree, ridge=ridge).fit(np.atleast_2d(features), targets)
