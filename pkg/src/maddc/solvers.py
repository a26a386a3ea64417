"""Iterative and direct solvers for the policy-valuation system (I - T) V = u.

The model-adaptive solver runs conjugate-gradient iterations on the
self-adjoint normal system ``(I - T)(I - T*) y = u`` and extracts
``V = (I - T*) y``; its sieve space is spanned by the successive residuals,
so no basis has to be chosen up front.  Successive approximation, a
projected-fixed-point (temporal-difference) solve on a user basis, and a
dense LU solve are provided as baselines.

Solvers accept any operator exposing ``beta``, ``n``, ``apply(v)`` (= T v)
and ``apply_adjoint(v)`` (= T* v) on raw arrays; :class:`~maddc.operators.
DiscountedOperator` is the dense implementation.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from .operators import ValueVector

__all__ = [
    "SolverConfig",
    "SolverReport",
    "SolverNumericalError",
    "BreakdownError",
    "solve_model_adaptive",
    "solve_successive_approximation",
    "solve_temporal_difference",
    "solve_exact",
    "polynomial_interaction_basis",
]

BREAKDOWN_FLOOR = 1e-300


class SolverNumericalError(RuntimeError):
    """NaN or Inf appeared during iteration; carries the iteration index."""

    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


class BreakdownError(RuntimeError):
    """The conjugate-gradient search direction collapsed before convergence."""


@dataclass
class SolverConfig:
    """Stopping rule and bookkeeping options shared by the iterative solvers.

    ``tol`` is checked against the residual in ``tol_norm`` ('sup' or 'l2').
    ``initial_y`` warm-starts the model-adaptive solver in y-space and
    ``initial_v`` warm-starts successive approximation; ``record_history``
    additionally keeps per-iteration residual vectors and iterates for
    diagnostic tests.  ``trace_path`` streams one CSV row per iteration.
    """

    tol: float = 1e-8
    tol_norm: str = "sup"
    max_iter: int = 10_000
    initial_y: Optional[np.ndarray] = None
    initial_v: Optional[np.ndarray] = None
    record_history: bool = False
    trace_path: Optional[str] = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.tol_norm not in ("sup", "l2"):
            raise ValueError(f"tol_norm must be 'sup' or 'l2', got {self.tol_norm!r}")
        if isinstance(self.initial_y, ValueVector):
            self.initial_y = self.initial_y.values
        if isinstance(self.initial_v, ValueVector):
            self.initial_v = self.initial_v.values

    def stop_norm(self, r: np.ndarray) -> float:
        if self.tol_norm == "sup":
            return float(np.max(np.abs(r)))
        return float(np.linalg.norm(r))


@dataclass
class SolverReport:
    """Diagnostics for one solve.

    ``residual_history`` holds one (sup-norm, l2-norm) pair per iteration.
    For the model-adaptive solver ``matvec_count`` equals 3 * iterations
    (two products for the normal-equations residual, one for the step
    length); products outside the main loop (warm-start residual, final
    extraction when converged at iteration 0) are logged in
    ``extra_matvecs``.
    """

    iterations: int = 0
    residual_history: List[Tuple[float, float]] = field(default_factory=list)
    matvec_count: int = 0
    extra_matvecs: int = 0
    converged: bool = False
    wall_time: float = 0.0
    final_y: Optional[np.ndarray] = None
    residual_vectors: Optional[List[np.ndarray]] = None
    iterates: Optional[List[np.ndarray]] = None
    alphas: Optional[List[float]] = None
    betas_cg: Optional[List[float]] = None


class _Trace:
    COLUMNS = ["iter", "res_sup", "res_l2", "alpha", "beta_cg", "elapsed_s"]

    def __init__(self, path):
        self._fh = open(path, "w", newline="") if path else None
        if self._fh:
            self._writer = csv.writer(self._fh)
            self._writer.writerow(self.COLUMNS)

    def row(self, it, res_sup, res_l2, alpha, beta_cg, elapsed):
        if self._fh:
            self._writer.writerow([it, repr(res_sup), repr(res_l2),
                                   repr(alpha), repr(beta_cg), repr(elapsed)])

    def close(self):
        if self._fh:
            self._fh.close()


def _check_finite_input(u: np.ndarray):
    if not np.all(np.isfinite(u)):
        bad = int(np.flatnonzero(~np.isfinite(u))[0])
        raise ValueError(f"u has a non-finite entry at state {bad}")


def solve_model_adaptive(op, u: ValueVector, cfg: Optional[SolverConfig] = None
                         ) -> Tuple[ValueVector, SolverReport]:
    """Conjugate-gradient solve of (I - T)(I - T*) y = u with V = (I - T*) y.

    Starting from ``y_0`` (default zero) with residual and search direction
    ``r_0 = s_0 = u - (I - T)(I - T*) y_0``, each iteration takes the step
    ``alpha = ||r||^2 / ||(I - T*) s||^2``, updates ``y``, recomputes the
    residual from its definition (three matrix-vector products per
    iteration), and updates the direction with ``beta_cg = ||r_k||^2 /
    ||r_{k-1}||^2``.  Euclidean norms drive the step lengths; the stopping
    norm is ``cfg.tol_norm``.

    Returns the solution and a :class:`SolverReport`; non-convergence
    within ``max_iter`` yields ``converged=False`` with the best iterate.
    """
    cfg = cfg or SolverConfig()
    _check_finite_input(u.values)
    start = time.perf_counter()
    trace = _Trace(cfg.trace_path)
    report = SolverReport()
    if cfg.record_history:
        report.residual_vectors, report.iterates = [], []
        report.alphas, report.betas_cg = [], []

    n = op.n
    warm = cfg.initial_y is not None
    y = np.array(cfg.initial_y, dtype=float, copy=True) if warm else np.zeros(n)
    if y.shape != (n,):
        raise ValueError(f"initial_y has shape {y.shape}, expected ({n},)")

    def normal_residual(yv):
        w = yv - op.apply_adjoint(yv)
        return u.values - (w - op.apply(w)), w

    if warm:
        r, v = normal_residual(y)
        report.extra_matvecs += 2
    else:
        r = u.values.copy()
        v = np.zeros(n)
    s = r.copy()
    rho = float(r @ r)

    def finish(converged, k):
        report.iterations = k
        report.converged = converged
        report.wall_time = time.perf_counter() - start
        report.final_y = y.copy()
        trace.close()
        return ValueVector(v, u.grid), report

    if cfg.stop_norm(r) <= cfg.tol:
        if not warm:
            v = np.zeros(n)
        # v already holds (I - T*) y for the warm start
        return finish(True, 0)

    initial_l2 = max(float(np.linalg.norm(r)), np.finfo(float).tiny)
    try:
        for k in range(1, cfg.max_iter + 1):
            with np.errstate(over="ignore", invalid="ignore"):
                w = s - op.apply_adjoint(s)
                denom = float(w @ w)
            report.matvec_count += 1
            if denom <= BREAKDOWN_FLOOR:
                if cfg.stop_norm(r) <= cfg.tol:
                    v = y - op.apply_adjoint(y)
                    # move this iteration's probe product into the extras so
                    # matvec_count stays 3 * iterations
                    report.matvec_count -= 1
                    report.extra_matvecs += 2
                    return finish(True, k - 1)
                raise BreakdownError(
                    f"search direction collapsed at iteration {k} with residual "
                    f"{cfg.stop_norm(r):g} above tolerance {cfg.tol:g}"
                )
            alpha = rho / denom
            with np.errstate(over="ignore", invalid="ignore"):
                y += alpha * s
                r, v = normal_residual(y)
                report.matvec_count += 2
                rho_new = float(r @ r)
            if not np.all(np.isfinite(r)):
                raise SolverNumericalError(
                    f"non-finite residual at iteration {k}", iteration=k)
            if np.sqrt(rho_new) > 1e13 * initial_l2:
                # finite-precision divergence: the tolerance sits below the
                # attainable residual floor and the recurrence has blown up
                # (legitimate transients peak a few orders above the initial
                # residual; growth past 1e13x never recovers)
                raise SolverNumericalError(
                    f"residual grew by 1e13x at iteration {k}; tolerance "
                    f"{cfg.tol:g} is below the attainable floor", iteration=k)
            beta_cg = rho_new / rho
            s = r + beta_cg * s
            rho = rho_new

            res_sup = float(np.max(np.abs(r)))
            res_l2 = float(np.sqrt(rho_new))
            report.residual_history.append((res_sup, res_l2))
            if cfg.record_history:
                report.residual_vectors.append(r.copy())
                report.iterates.append(y.copy())
                report.alphas.append(alpha)
                report.betas_cg.append(beta_cg)
            trace.row(k, res_sup, res_l2, alpha, beta_cg, time.perf_counter() - start)

            if cfg.stop_norm(r) <= cfg.tol:
                return finish(True, k)
        return finish(False, cfg.max_iter)
    finally:
        trace.close()


def solve_successive_approximation(op, u: ValueVector,
                                   cfg: Optional[SolverConfig] = None
                                   ) -> Tuple[ValueVector, SolverReport]:
    """Fixed-point iteration V <- u + T V.

    The increment ``V_{k+1} - V_k`` equals the equation residual
    ``u - (I - T) V_k``, so the stopping rule is a residual test in the
    configured norm.  Converges linearly at rate beta.
    """
    cfg = cfg or SolverConfig()
    _check_finite_input(u.values)
    start = time.perf_counter()
    trace = _Trace(cfg.trace_path)
    report = SolverReport()
    if cfg.record_history:
        report.residual_vectors, report.iterates = [], []

    n = op.n
    V = (np.array(cfg.initial_v, dtype=float, copy=True)
         if cfg.initial_v is not None else np.zeros(n))
    if V.shape != (n,):
        raise ValueError(f"initial_v has shape {V.shape}, expected ({n},)")

    try:
        for k in range(1, cfg.max_iter + 1):
            V_next = u.values + op.apply(V)
            report.matvec_count += 1
            diff = V_next - V
            if not np.all(np.isfinite(V_next)):
                raise SolverNumericalError(
                    f"non-finite iterate at iteration {k}", iteration=k)
            res_sup = float(np.max(np.abs(diff)))
            res_l2 = float(np.linalg.norm(diff))
            report.residual_history.append((res_sup, res_l2))
            if cfg.record_history:
                report.residual_vectors.append(diff.copy())
                report.iterates.append(V_next.copy())
            trace.row(k, res_sup, res_l2, float("nan"), float("nan"),
                      time.perf_counter() - start)
            V = V_next
            if cfg.stop_norm(diff) <= cfg.tol:
                report.iterations = k
                report.converged = True
                break
        else:
            report.iterations = cfg.max_iter
            report.converged = False
    finally:
        trace.close()
    report.wall_time = time.perf_counter() - start
    return ValueVector(V, u.grid), report


def polynomial_interaction_basis(points: np.ndarray, degree: int) -> np.ndarray:
    """Intercept, per-coordinate monomials up to ``degree``, and all pairwise
    products of the raw coordinates."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = points.shape
    cols = [np.ones(n)]
    for power in range(1, degree + 1):
        for j in range(d):
            cols.append(points[:, j] ** power)
    for i in range(d):
        for j in range(i + 1, d):
            cols.append(points[:, i] * points[:, j])
    return np.column_stack(cols)


def solve_temporal_difference(op, u: ValueVector, basis: np.ndarray,
                              weights: Optional[np.ndarray] = None
                              ) -> Tuple[ValueVector, SolverReport]:
    """Projected fixed point V = Pi_S (u + T V) on the span of ``basis``.

    Solves ``Phi' W (Phi - T Phi) theta = Phi' W u`` with W = diag(weights)
    (uniform by default) and returns ``V = Phi theta``.  Basis columns are
    orthonormalized under the weighted inner product via pivoted QR, with
    exactly dependent columns dropped; a singular projected system raises
    with the rank deficiency named.  The report carries the equation
    residual ``||(I - T) V - u||`` history entry.
    """
    _check_finite_input(u.values)
    start = time.perf_counter()
    report = SolverReport()
    n = op.n
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    if basis.shape[0] != n:
        raise ValueError(f"basis has {basis.shape[0]} rows, expected {n}")
    if weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n,) or weights.min() < 0 or weights.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive total mass")

    sqrt_w = np.sqrt(weights)
    q, rmat, _ = scipy.linalg.qr(sqrt_w[:, None] * basis, mode="economic",
                                 pivoting=True)
    diag = np.abs(np.diag(rmat))
    rank = int(np.sum(diag > max(basis.shape) * np.finfo(float).eps * diag[0])) if diag.size else 0
    if rank == 0:
        raise np.linalg.LinAlgError("basis has rank 0 under the weight inner product")
    q = q[:, :rank]
    # columns of psi are weighted-orthonormal: (sqrt(W) psi) = q
    safe = np.where(sqrt_w > 0, sqrt_w, 1.0)
    psi = q / safe[:, None]
    psi[sqrt_w == 0] = 0.0

    t_psi = np.column_stack([op.apply(psi[:, j]) for j in range(rank)])
    report.matvec_count += rank
    gram = q.T @ (sqrt_w[:, None] * (psi - t_psi))
    rhs = q.T @ (sqrt_w * u.values)
    try:
        theta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            f"projected TD system is singular (basis rank {rank} of "
            f"{basis.shape[1]} columns): {err}"
        ) from err
    V = psi @ theta
    residual = u.values - (V - op.apply(V))
    report.matvec_count += 1
    report.residual_history.append(
        (float(np.max(np.abs(residual))), float(np.linalg.norm(residual))))
    report.converged = True
    report.wall_time = time.perf_counter() - start
    return ValueVector(V, u.grid), report


def solve_exact(op, u: ValueVector, size_cap: int = 50_000) -> ValueVector:
    """Dense LU solve of (I - beta P) V = u (baseline, small systems only)."""
    _check_finite_input(u.values)
    n = op.n
    if n > size_cap:
        raise ValueError(f"system size {n} exceeds the dense-solve cap {size_cap}")
    if getattr(op, "kernel", None) is None:
        raise ValueError(
            f"exact solve needs an operator with a dense kernel, got {type(op).__name__}")
    matrix = np.eye(n) - op.beta * op.kernel.matrix
    try:
        V = scipy.linalg.solve(matrix, u.values)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as err:
        raise np.linalg.LinAlgError(f"(I - T) is singular: {err}") from err
    return ValueVector(V, u.grid)
