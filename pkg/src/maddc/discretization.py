"""Grid and kernel construction from continuous-state primitives.

Covers AR(1) discretization (Tauchen bins with absorbed tails), tensor
products of independent chains, midpoint regular grids, Hammersley
low-discrepancy points, normalization of raw transition densities on a
grid, and the one-step extension of a solved value function to off-grid
points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .operators import StateGrid, TransitionKernel

__all__ = [
    "Ar1Spec",
    "tauchen",
    "tensor_product",
    "regular_grid",
    "hammersley",
    "normalize_kernel",
    "interpolate_off_grid",
]

DEFAULT_TAUCHEN_WIDTH = 3.0
DEFAULT_SIZE_CAP = 20_000_000


@dataclass(frozen=True)
class Ar1Spec:
    """AR(1) process x' = intercept + rho * x + N(0, sigma^2)."""

    intercept: float
    rho: float
    sigma: float

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise ValueError(f"|rho| must be below 1, got {self.rho}")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def mean(self) -> float:
        return self.intercept / (1.0 - self.rho)

    @property
    def stationary_sd(self) -> float:
        return self.sigma / np.sqrt(1.0 - self.rho**2)


def tauchen(spec: Ar1Spec, m: int, width: float = DEFAULT_TAUCHEN_WIDTH
            ) -> Tuple[StateGrid, TransitionKernel]:
    """Discretize an AR(1) into an m-state chain.

    Points are equally spaced over ``mean +/- width * stationary sd``; row i
    assigns Gaussian-CDF bin masses conditional on point i, with the two
    boundary bins absorbing the tails so each row sums to one.

    Parameters
    ----------
    spec : Ar1Spec
        Process parameters.
    m : int
        Number of grid points, at least 2.
    width : float
        Half-width of the grid in stationary standard deviations.
    """
    if m < 2:
        raise ValueError(f"need at least 2 points, got {m}")
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    pts = np.linspace(spec.mean - width * spec.stationary_sd,
                      spec.mean + width * spec.stationary_sd, m)
    half_step = 0.5 * (pts[1] - pts[0])
    matrix = np.empty((m, m))
    for i in range(m):
        cond_mean = spec.intercept + spec.rho * pts[i]
        # interior bin edges; tails absorbed into the first/last bin
        edges = norm.cdf((pts[:-1] + half_step - cond_mean) / spec.sigma)
        matrix[i] = np.diff(np.concatenate(([0.0], edges, [1.0])))
    grid = StateGrid(pts.reshape(-1, 1))
    return grid, TransitionKernel(matrix, grid)


def tensor_product(components: Sequence[Tuple[StateGrid, TransitionKernel]],
                   size_cap: int = DEFAULT_SIZE_CAP
                   ) -> Tuple[StateGrid, TransitionKernel]:
    """Product grid and Kronecker-product kernel of independent components.

    The product index is lexicographic with the last listed component
    varying fastest, matching ``numpy.kron`` ordering, so state indices are
    stable across runs.
    """
    if len(components) == 0:
        raise ValueError("need at least one component")
    if len(components) == 1:
        return components[0]
    total = 1
    for grid, _ in components:
        total *= grid.count
    if total > size_cap:
        raise ValueError(f"product grid would have {total} states, above the cap {size_cap}")
    mesh = np.meshgrid(*[g.points.ravel() for g, _ in components], indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    matrix = components[0][1].matrix
    for _, kern in components[1:]:
        matrix = np.kron(matrix, kern.matrix)
    grid = StateGrid(points)
    return grid, TransitionKernel(matrix, grid)


def regular_grid(d: int, m_per_dim: int, size_cap: int = DEFAULT_SIZE_CAP) -> StateGrid:
    """Tensor product of the midpoint set {1/(2m), 3/(2m), ..., (2m-1)/(2m)}."""
    if d < 1:
        raise ValueError(f"dimension must be at least 1, got {d}")
    if m_per_dim < 1:
        raise ValueError(f"need at least 1 point per dimension, got {m_per_dim}")
    if m_per_dim**d > size_cap:
        raise ValueError(f"grid would have {m_per_dim**d} points, above the cap {size_cap}")
    axis = (2.0 * np.arange(m_per_dim) + 1.0) / (2.0 * m_per_dim)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return StateGrid(np.column_stack([m.ravel() for m in mesh]))


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    out = np.zeros(len(indices))
    scale = 1.0 / base
    idx = indices.copy()
    while np.any(idx > 0):
        out += (idx % base) * scale
        idx //= base
        scale /= base
    return out


def _first_primes(count: int) -> list[int]:
    primes, candidate = [], 2
    while len(primes) < count:
        if all(candidate % p for p in primes):
            primes.append(candidate)
        candidate += 1
    return primes


def hammersley(d: int, m: int) -> StateGrid:
    """Hammersley point set: (i/m, phi_2(i), phi_3(i), ...), i = 0..m-1.

    The trailing coordinates are radical inverses in the first d-1 primes;
    no scrambling, so the set is deterministic.
    """
    if d < 1:
        raise ValueError(f"dimension must be at least 1, got {d}")
    if m < 1:
        raise ValueError(f"need at least 1 point, got {m}")
    idx = np.arange(m)
    cols = [idx / m]
    for base in _first_primes(d - 1):
        cols.append(_radical_inverse(idx, base))
    return StateGrid(np.column_stack(cols))


def normalize_kernel(density: Callable[[np.ndarray, np.ndarray], float],
                     grid: StateGrid) -> TransitionKernel:
    """Row-normalize a transition density evaluated on the grid.

    ``density(x_next, x)`` is evaluated at every grid pair and each row is
    divided by its sum, yielding the exactly row-stochastic matrix behind
    the discretized system.
    """
    n = grid.count
    raw = np.empty((n, n))
    for i in range(n):
        x = grid.points[i]
        for j in range(n):
            raw[i, j] = density(grid.points[j], x)
    if raw.min() < 0.0:
        i, j = np.unravel_index(np.argmin(raw), raw.shape)
        raise ValueError(f"density is negative ({raw[i, j]:g}) at pair ({i}, {j})")
    sums = raw.sum(axis=1)
    if sums.min() <= 0.0:
        bad = int(np.argmin(sums))
        raise ValueError(f"transition density sums to zero over the grid at state {bad}")
    return TransitionKernel(raw / sums[:, None], grid)


def interpolate_off_grid(v_grid, u_fn: Callable[[np.ndarray], float],
                         density: Callable[[np.ndarray, np.ndarray], float],
                         beta: float, x) -> float:
    """One-step extension of a solved grid value function to a point x.

    Returns ``u(x) + beta * sum_i ftilde(x_i | x) * V(x_i)`` with the
    density row normalized over the grid.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grid = v_grid.grid
    weights = np.array([density(grid.points[i], x) for i in range(grid.count)])
    if weights.min() < 0.0:
        raise ValueError("transition density is negative at the query point")
    total = weights.sum()
    if total <= 0.0:
        raise ValueError(f"transition density sums to zero over the grid at x={x}")
    return float(u_fn(x) + beta * (weights / total) @ v_grid.values)
