"""Discounted transition operators on a discrete state grid.

The policy-valuation system ``(I - T) V = u`` is built from a row-stochastic
transition matrix P and a discount factor beta, with ``T v = beta * P v``.
This module holds the grid/kernel/operator types, their adjoints, the
normal-equations composition ``(I - T)(I - T*)``, stationary distributions,
and CSV import/export for grids and kernels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "StateGrid",
    "TransitionKernel",
    "DiscountedOperator",
    "ValueVector",
    "GridMismatchError",
    "ConvergenceError",
    "apply_T",
    "apply_T_adjoint",
    "apply_normal",
    "stationary_distribution",
    "mix_kernel",
    "save_grid_csv",
    "load_grid_csv",
    "save_kernel_csv",
    "load_kernel_csv",
]

ROW_SUM_TOL = 1e-12


class GridMismatchError(ValueError):
    """Raised when two objects defined on different grids are combined."""


class ConvergenceError(RuntimeError):
    """Iteration failed to converge; carries the last iterate and gap."""

    def __init__(self, message, last=None, gap=None):
        super().__init__(message)
        self.last = last
        self.gap = gap


@dataclass(frozen=True, eq=False)
class StateGrid:
    """Enumerated discrete state space: M points in R^d plus optional labels."""

    points: np.ndarray
    labels: Optional[Sequence] = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2:
            raise ValueError(f"points must be an (M, d) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("grid must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        uniq = np.unique(pts, axis=0)
        if uniq.shape[0] != pts.shape[0]:
            raise ValueError(f"grid points must be unique; {pts.shape[0] - uniq.shape[0]} duplicates found")
        object.__setattr__(self, "points", pts)
        pts.setflags(write=False)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, StateGrid):
            return NotImplemented
        return self.points.shape == other.points.shape and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.points.shape, self.points.tobytes()))


class TransitionKernel:
    """Row-stochastic M x M transition matrix tied to a state grid.

    Rows must be nonnegative and sum to 1 within 1e-12; kernels failing
    the check are rejected at construction rather than renormalized
    (explicit normalization lives in :mod:`maddc.discretization`).
    """

    def __init__(self, matrix: np.ndarray, grid: StateGrid):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"kernel matrix must be square, got shape {matrix.shape}")
        if matrix.shape[0] != grid.count:
            raise ValueError(
                f"kernel size {matrix.shape[0]} does not match grid size {grid.count}"
            )
        if matrix.min() < 0.0:
            i, j = np.unravel_index(np.argmin(matrix), matrix.shape)
            raise ValueError(f"negative transition probability {matrix[i, j]:g} at ({i}, {j})")
        row_sums = matrix.sum(axis=1)
        worst = np.argmax(np.abs(row_sums - 1.0))
        if abs(row_sums[worst] - 1.0) > ROW_SUM_TOL:
            raise ValueError(
                f"row {worst} sums to {row_sums[worst]:.15f}, violating the {ROW_SUM_TOL:g} tolerance"
            )
        matrix.setflags(write=False)
        self.matrix = matrix
        self.grid = grid

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """P v."""
        return self.matrix @ v

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        """P^T v."""
        return self.matrix.T @ v


class DiscountedOperator:
    """T v = beta * P v for a row-stochastic kernel P and beta in (0, 1).

    Exposes raw-array ``apply``/``apply_adjoint`` used by the iterative
    solvers; the free functions below add :class:`ValueVector` validation.
    """

    def __init__(self, beta: float, kernel: TransitionKernel):
        if not (0.0 < beta < 1.0):
            raise ValueError(f"discount factor must lie in (0, 1), got {beta}")
        self.beta = float(beta)
        self.kernel = kernel

    @property
    def grid(self) -> StateGrid:
        return self.kernel.grid

    @property
    def n(self) -> int:
        return self.kernel.size

    def apply(self, v: np.ndarray) -> np.ndarray:
        """T v = beta P v (one matrix-vector product)."""
        return self.beta * self.kernel.matvec(v)

    def apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        """T* v = beta P^T v (one matrix-vector product)."""
        return self.beta * self.kernel.rmatvec(v)


@dataclass(frozen=True, eq=False)
class ValueVector:
    """Vector of length grid.count with finite entries, plus norm helpers."""

    values: np.ndarray
    grid: StateGrid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.shape[0] != self.grid.count:
            raise ValueError(
                f"value vector length {vals.shape[0]} does not match grid size {self.grid.count}"
            )
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise ValueError(f"non-finite value at state {bad}")
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.values))

    @staticmethod
    def zeros(grid: StateGrid) -> "ValueVector":
        return ValueVector(np.zeros(grid.count), grid)


def _check_same_grid(op, v: ValueVector):
    if getattr(op, "grid", None) is not None and v.grid != op.grid:
        raise GridMismatchError(
            f"operator grid has {op.grid.count} states but vector grid has {v.grid.count}"
        )
    if v.values.shape[0] != op.n:
        raise GridMismatchError(
            f"operator size {op.n} does not match vector length {v.values.shape[0]}"
        )


def apply_T(op: DiscountedOperator, v: ValueVector) -> ValueVector:
    """beta * P v; exactly one matrix-vector product."""
    _check_same_grid(op, v)
    return ValueVector(op.apply(v.values), v.grid)


def apply_T_adjoint(op: DiscountedOperator, v: ValueVector) -> ValueVector:
    """beta * P^T v (the adjoint under the Euclidean inner product)."""
    _check_same_grid(op, v)
    return ValueVector(op.apply_adjoint(v.values), v.grid)


def apply_normal(op: DiscountedOperator, y: ValueVector) -> ValueVector:
    """(I - T)(I - T*) y; exactly two matrix-vector products."""
    _check_same_grid(op, y)
    w = y.values - op.apply_adjoint(y.values)
    return ValueVector(w - op.apply(w), y.grid)


def stationary_distribution(kernel: TransitionKernel, tol: float = 1e-12,
                            max_iter: int = 100_000) -> np.ndarray:
    """Stationary distribution mu with mu^T P = mu^T, by power iteration.

    Parameters
    ----------
    kernel : TransitionKernel
        Row-stochastic chain; must be ergodic enough for power iteration.
    tol : float
        L1 stopping tolerance on successive iterates.
    max_iter : int
        Iteration cap; exceeding it raises :class:`ConvergenceError`
        carrying the last iterate and remaining gap.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    n = kernel.size
    mu = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = kernel.rmatvec(mu)
        gap = float(np.abs(nxt - mu).sum())
        mu = nxt
        if gap <= tol:
            # guard against roundoff drift before returning a distribution
            mu = np.maximum(mu, 0.0)
            return mu / mu.sum()
    raise ConvergenceError(
        f"power iteration did not reach L1 tolerance {tol:g} in {max_iter} iterations "
        f"(last gap {gap:g})",
        last=mu, gap=gap,
    )


def mix_kernel(per_action: Sequence[TransitionKernel], ccp: np.ndarray) -> TransitionKernel:
    """Policy-mixed kernel: row i = sum_a p(a|x_i) * row_i of kernel a.

    All kernels must share one grid and ``ccp`` must be (M, A) with rows on
    the simplex; the output is row-stochastic by construction.
    """
    if len(per_action) == 0:
        raise ValueError("need at least one per-action kernel")
    grid = per_action[0].grid
    for k, kern in enumerate(per_action):
        if kern.grid != grid:
            raise GridMismatchError(f"kernel {k} is defined on a different grid")
    ccp = np.asarray(ccp, dtype=float)
    if ccp.ndim != 2 or ccp.shape != (grid.count, len(per_action)):
        raise ValueError(
            f"ccp shape {ccp.shape} does not match ({grid.count}, {len(per_action)}) "
            f"for {len(per_action)} actions"
        )
    mixed = np.zeros((grid.count, grid.count))
    for a, kern in enumerate(per_action):
        mixed += ccp[:, a:a + 1] * kern.matrix
    return TransitionKernel(mixed, grid)


# ---------------------------------------------------------------------------
# CSV import/export
# ---------------------------------------------------------------------------

def save_grid_csv(grid: StateGrid, path):
    """Write a grid as ``index,x1..xd`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + [f"x{i + 1}" for i in range(grid.dim)])
        for i, point in enumerate(grid.points):
            writer.writerow([i] + [repr(float(c)) for c in point])


def load_grid_csv(path) -> StateGrid:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "index":
            raise ValueError(f"unexpected grid CSV header: {header}")
        rows = sorted(reader, key=lambda r: int(r[0]))
    points = np.array([[float(c) for c in row[1:]] for row in rows])
    return StateGrid(points)


def save_kernel_csv(kernel: TransitionKernel, path):
    """Write a kernel as ``row,col,value`` triplets (zeros omitted)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        rows, cols = np.nonzero(kernel.matrix)
        for i, j in zip(rows, cols):
            writer.writerow([i, j, repr(float(kernel.matrix[i, j]))])


def load_kernel_csv(path, grid: StateGrid) -> TransitionKernel:
    matrix = np.zeros((grid.count, grid.count))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["row", "col", "value"]:
            raise ValueError(f"unexpected kernel CSV header: {header}")
        for row in reader:
            matrix[int(row[0]), int(row[1])] = float(row[2])
    return TransitionKernel(matrix, grid)
