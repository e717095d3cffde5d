"""Uniform time grid with pre-history, path ensembles, noise pools, and norms.

All solvers in this package share one discrete convention: grid points
``t_i = i*h`` for ``i = 0..steps``, coefficients held constant on
``[t_i, t_{i+1})``, controls and diffusion increments attached to the left
endpoint, and pre-history segments stored at negative indices down to
``-history_len``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "PathEnsemble",
    "NoiseEnsemble",
    "GridIncompatibleError",
    "HorizonError",
    "build_grid",
    "window_mask",
    "discounted_norm",
    "discounted_norm_sq",
    "tree_sum",
    "tree_mean",
    "write_ensemble",
    "read_ensemble",
]


class GridIncompatibleError(ValueError):
    """Delay is not an integer multiple of the step."""


class HorizonError(IndexError):
    """Attempted read beyond the stored horizon or history."""


def _lag_steps(lag: float, h: float, name: str) -> int:
    m = lag / h
    m_int = int(round(m))
    if abs(m - m_int) > 1e-12 * max(1.0, abs(m)):
        raise GridIncompatibleError(f"{name}={lag} is not an integer multiple of h={h}")
    return m_int


@dataclass(frozen=True)
class TimeGrid:
    T: float
    h: float
    steps: int
    m_delta: int
    m_theta: int

    @property
    def history_len(self) -> int:
        return max(self.m_delta, self.m_theta)

    @property
    def delta(self) -> float:
        return self.m_delta * self.h

    @property
    def theta(self) -> float:
        return self.m_theta * self.h

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.h

    def time(self, i: int) -> float:
        return i * self.h


def build_grid(T: float, h: float, delta: float = 0.0, theta: float = 0.0) -> TimeGrid:
    """Uniform grid on [0, T] whose step divides both delays exactly."""
    if T <= 0 or h <= 0:
        raise ValueError("T and h must be positive")
    if delta < 0 or theta < 0:
        raise ValueError("delays must be nonnegative")
    steps = _lag_steps(T, h, "T")
    if steps < 1:
        raise GridIncompatibleError("grid must have at least one step")
    m_delta = _lag_steps(delta, h, "delta")
    m_theta = _lag_steps(theta, h, "theta")
    return TimeGrid(T=float(T), h=float(h), steps=steps, m_delta=m_delta, m_theta=m_theta)


# ---------------------------------------------------------------------------
# deterministic reductions
# ---------------------------------------------------------------------------

def tree_sum(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Pairwise-tree sum along ``axis``; result independent of worker chunking."""
    a = np.moveaxis(np.asarray(a, dtype=float), axis, 0)
    n = a.shape[0]
    if n == 0:
        return np.zeros(a.shape[1:])
    while n > 1:
        half = n // 2
        head = a[:half] + a[half : 2 * half]
        if n % 2:
            a = np.concatenate([head, a[2 * half : n]], axis=0)
        else:
            a = head
        n = a.shape[0]
    return a[0]


def tree_mean(a: np.ndarray, axis: int = 0) -> np.ndarray:
    n = np.asarray(a).shape[axis]
    return tree_sum(a, axis=axis) / n


# ---------------------------------------------------------------------------
# path ensembles
# ---------------------------------------------------------------------------


@dataclass
class PathEnsemble:
    """M sample paths on a grid, with a pre-history segment.

    ``values`` has shape (M, history_len + steps + 1, dim); grid index ``i``
    (which may be negative down to ``-history_len``) lives at column
    ``history_len + i``.
    """

    grid: TimeGrid
    values: np.ndarray
    kind: str = "state"

    @classmethod
    def zeros(cls, grid: TimeGrid, M: int, dim: int, kind: str = "state") -> "PathEnsemble":
        L = grid.history_len + grid.steps + 1
        return cls(grid=grid, values=np.zeros((M, L, dim)), kind=kind)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def _col(self, i: int) -> int:
        c = self.grid.history_len + i
        if c < 0 or c >= self.values.shape[1]:
            raise HorizonError(f"grid index {i} outside [-{self.grid.history_len}, {self.grid.steps}]")
        return c

    def at(self, i: int) -> np.ndarray:
        """(M, dim) view at grid index i (negative i reads pre-history)."""
        return self.values[:, self._col(i), :]

    def set(self, i: int, vals: np.ndarray) -> None:
        self.values[:, self._col(i), :] = vals

    def set_history(self, history: np.ndarray) -> None:
        """Fill indices [-history_len, -1] from a (history_len, dim) segment."""
        hl = self.grid.history_len
        if hl == 0:
            return
        self.values[:, :hl, :] = np.asarray(history, dtype=float)[None, :, :]

    def shifted(self, path: int, i: int, lag: int) -> np.ndarray:
        """Value at index i+lag for one path; refuses reads beyond the horizon."""
        j = i + lag
        if j > self.grid.steps:
            raise HorizonError(f"forward read at index {j} beyond horizon {self.grid.steps}")
        return self.values[path, self._col(j), :]

    def body(self) -> np.ndarray:
        """(M, steps+1, dim) view of the [0, T] segment."""
        return self.values[:, self.grid.history_len :, :]

    def mean_path(self) -> np.ndarray:
        """(history_len+steps+1, dim) pathwise mean, deterministic reduction."""
        return tree_mean(self.values, axis=0)

    def copy(self) -> "PathEnsemble":
        return PathEnsemble(grid=self.grid, values=self.values.copy(), kind=self.kind)


def shifted_value(p: PathEnsemble, path: int, i: int, lag: int) -> np.ndarray:
    return p.shifted(path, i, lag)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


@dataclass
class NoiseEnsemble:
    """Brownian increments, one scalar stream per path.

    Path ``m`` draws from a counter-based generator keyed by ``seed ^ m``, so
    regeneration from (seed, M, grid) is bit-identical and independent of
    evaluation order.
    """

    grid: TimeGrid
    seed: int
    dW: np.ndarray  # (M, steps)

    @classmethod
    def build(cls, grid: TimeGrid, M: int, seed: int) -> "NoiseEnsemble":
        dW = np.empty((M, grid.steps))
        root = np.uint64(seed)
        sqrt_h = np.sqrt(grid.h)
        for m in range(M):
            g = np.random.Generator(np.random.Philox(key=int(root ^ np.uint64(m))))
            dW[m] = g.standard_normal(grid.steps) * sqrt_h
        return cls(grid=grid, seed=int(seed), dW=dW)

    @property
    def M(self) -> int:
        return self.dW.shape[0]


# ---------------------------------------------------------------------------
# masks and norms
# ---------------------------------------------------------------------------

_WINDOWS = ("start-to-T-delta", "start-to-T-theta", "theta-to-T", "start-to-theta")


def window_mask(grid: TimeGrid, window: str) -> np.ndarray:
    """Indicator over grid points 0..steps; closed windows, boundaries included.

    Windows: ``[0, T-delta]``, ``[0, T-theta]``, ``[theta, T]``, ``[0, theta]``.
    """
    i = np.arange(grid.steps + 1)
    if window in ("[0,T-delta]", "start-to-T-delta"):
        return (i <= grid.steps - grid.m_delta).astype(float)
    if window in ("[0,T-theta]", "start-to-T-theta"):
        return (i <= grid.steps - grid.m_theta).astype(float)
    if window in ("[theta,T]", "theta-to-T"):
        return (i >= grid.m_theta).astype(float)
    if window in ("[0,theta]", "start-to-theta"):
        return (i <= grid.m_theta).astype(float)
    raise ValueError(f"unknown window {window!r}; expected one of {_WINDOWS}")


def discounted_norm_sq(p: PathEnsemble | np.ndarray, rho: float, grid: TimeGrid | None = None) -> float:
    """Monte Carlo + left-endpoint estimate of E int_0^T e^{-rho s} |v|^2 ds."""
    if isinstance(p, PathEnsemble):
        grid = p.grid
        body = p.body()
    else:
        if grid is None:
            raise ValueError("grid required for raw arrays")
        body = np.asarray(p, dtype=float)
        if body.ndim == 2:  # deterministic path (steps+1, dim)
            body = body[None, :, :]
    w = np.exp(-rho * grid.times()[: grid.steps])
    sq = np.sum(body[:, : grid.steps, :] ** 2, axis=2)  # (M, steps)
    per_path = sq @ w * grid.h
    return float(tree_mean(per_path))


def discounted_norm(p: PathEnsemble | np.ndarray, rho: float, grid: TimeGrid | None = None) -> float:
    return float(np.sqrt(discounted_norm_sq(p, rho, grid)))


# ---------------------------------------------------------------------------
# flat binary / CSV export
# ---------------------------------------------------------------------------

_MAGIC = b"MFPE"


def write_ensemble(path: str, p: PathEnsemble) -> None:
    """Flat binary: magic, M, steps, history_len, dim (int64), h (float64), payload."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<qqqqd", p.M, p.grid.steps, p.grid.history_len, p.dim, p.grid.h))
        f.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def read_ensemble(path: str, grid: TimeGrid, kind: str = "state") -> PathEnsemble:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError("not an ensemble file")
        M, steps, hist, dim, h = struct.unpack("<qqqqd", f.read(40))
        if steps != grid.steps or hist != grid.history_len or abs(h - grid.h) > 1e-12:
            raise GridIncompatibleError("ensemble file does not match grid")
        payload = np.frombuffer(f.read(), dtype="<f8").reshape(M, hist + steps + 1, dim)
    return PathEnsemble(grid=grid, values=payload.copy(), kind=kind)


def ensemble_to_csv(path: str, p: PathEnsemble, header: str = "") -> None:
    hl = p.grid.history_len
    times = (np.arange(-hl, p.grid.steps + 1)) * p.grid.h
    cols = [times]
    names = ["t"]
    for m in range(p.M):
        for d in range(p.dim):
            cols.append(p.values[m, :, d])
            names.append(f"path{m}_c{d}")
    data = np.column_stack(cols)
    head = (header + "\n" if header else "") + ",".join(names)
    np.savetxt(path, data, delimiter=",", header=head, comments="# " if header else "")
