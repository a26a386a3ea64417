"""Policy-valuation assembly, policy iteration, and storable-goods loops.

Given a model's flow utilities and per-action kernels, a conditional
choice probability matrix pins down the linear system ``(I - T) V = u``
with ``u`` the policy-weighted flow utility plus the Euler constant and
the choice-entropy correction.  Policy iteration alternates that solve
with a softmax policy-improvement step.  The storable-goods drivers add
an outer loop over an integer consumption function, mirroring the three
solution algorithms compared in the benchmarks.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from .operators import (DiscountedOperator, StateGrid, TransitionKernel,
                        ValueVector, mix_kernel)
from .solvers import (SolverConfig, SolverReport, solve_exact,
                      solve_model_adaptive, solve_successive_approximation)

__all__ = [
    "EULER_GAMMA",
    "Ccp",
    "ConditionalValues",
    "DdcModel",
    "assemble_policy_valuation",
    "policy_improvement",
    "hotz_miller_invert",
    "policy_iteration",
    "PolicyIterationReport",
    "StorableSolution",
    "storable_policy_loop",
    "value_iteration_driver",
    "one_step_value_iteration_driver",
]

# Euler-Mascheroni constant, 20 digits
EULER_GAMMA = 0.57721566490153286061

CCP_LOG_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class Ccp:
    """Conditional choice probabilities p(a|x): (M, A), strictly positive rows
    on the simplex."""

    probs: np.ndarray
    grid: StateGrid

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError(f"ccp must be (M, A), got shape {probs.shape}")
        if probs.shape[0] != self.grid.count:
            raise ValueError(
                f"ccp has {probs.shape[0]} rows but the grid has {self.grid.count} states")
        if probs.min() <= 0.0:
            x, a = np.unravel_index(np.argmin(probs), probs.shape)
            raise ValueError(
                f"choice probability must be strictly positive; p({a}|{x}) = {probs[x, a]:g}")
        row_sums = probs.sum(axis=1)
        worst = int(np.argmax(np.abs(row_sums - 1.0)))
        if abs(row_sums[worst] - 1.0) > 1e-12:
            raise ValueError(f"ccp row {worst} sums to {row_sums[worst]:.15f}")
        object.__setattr__(self, "probs", probs)
        probs.setflags(write=False)

    @property
    def action_count(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class ConditionalValues:
    """Conditional value function v(x, a) = u(x, a) + beta E[V | x, a]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"conditional values must be (M, A), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("conditional values contain non-finite entries")
        object.__setattr__(self, "values", values)
        values.setflags(write=False)


@runtime_checkable
class DdcModel(Protocol):
    """Contract shared by the reference models.

    Required: ``grid``, ``beta``, ``action_count``, per-state flow utility
    and per-action transition kernels.  Models may additionally expose
    ``flow_utility_matrix()``, ``expected_values(V)`` (returning E[V|x,a]
    without the discount), and ``build_policy_operator(ccp)`` as fast
    paths; the drivers use them when present.
    """

    grid: StateGrid
    beta: float
    action_count: int

    def flow_utility(self, x_index: int, a: int) -> float: ...

    def per_action_kernels(self) -> Sequence[TransitionKernel]: ...


def _flow_matrix(model) -> np.ndarray:
    fast = getattr(model, "flow_utility_matrix", None)
    if fast is not None:
        return np.asarray(fast(), dtype=float)
    m, n_act = model.grid.count, model.action_count
    out = np.empty((m, n_act))
    for x in range(m):
        for a in range(n_act):
            out[x, a] = model.flow_utility(x, a)
    return out


def _expected_values(model, values: np.ndarray) -> np.ndarray:
    """E[V | x, a] for every state/action, shape (M, A)."""
    fast = getattr(model, "expected_values", None)
    if fast is not None:
        return np.asarray(fast(values), dtype=float)
    kernels = model.per_action_kernels()
    return np.column_stack([k.matvec(values) for k in kernels])


def assemble_policy_valuation(model, ccp: Ccp,
                              include_euler_constant: bool = True
                              ) -> Tuple[ValueVector, DiscountedOperator]:
    """Build (u, T) for the policy-valuation system at the given CCPs.

    ``u(x) = sum_a p(a|x) u(x,a) + kappa - sum_a p(a|x) log p(a|x)`` with
    kappa the Euler constant, and the kernel is the p-mixture of the
    per-action kernels.  Entropy terms floor probabilities at 1e-300 inside
    the log only; probabilities are never renormalized here.
    """
    if ccp.grid != model.grid:
        raise ValueError("ccp is defined on a different grid than the model")
    if ccp.action_count != model.action_count:
        raise ValueError(
            f"ccp has {ccp.action_count} actions but the model has {model.action_count}")
    p = ccp.probs
    flows = _flow_matrix(model)
    kappa = EULER_GAMMA if include_euler_constant else 0.0
    u = (p * flows).sum(axis=1) + kappa - (p * np.log(np.clip(p, CCP_LOG_FLOOR, None))).sum(axis=1)
    builder = getattr(model, "build_policy_operator", None)
    if builder is not None:
        op = builder(p)
    else:
        op = DiscountedOperator(model.beta, mix_kernel(model.per_action_kernels(), p))
    return ValueVector(u, model.grid), op


def policy_improvement(model, V: ValueVector) -> Tuple[Ccp, ConditionalValues]:
    """Softmax policy update from an integrated value function.

    Computes ``v(x,a) = u(x,a) + beta E[V|x,a]`` and the logit CCP rows with
    max-subtraction; probabilities are floored at 1e-300 so downstream logs
    stay finite when an action is numerically dominated.
    """
    if V.grid != model.grid:
        raise ValueError("value vector is defined on a different grid than the model")
    v = _flow_matrix(model) + model.beta * _expected_values(model, V.values)
    shifted = v - v.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    probs = np.clip(probs, CCP_LOG_FLOOR, None)
    return Ccp(probs, model.grid), ConditionalValues(v)


def hotz_miller_invert(v: ConditionalValues, ccp: Ccp, a: int) -> ValueVector:
    """Integrated value from one action: V(x) = v(x,a) - log p(a|x) + kappa.

    For a mutually consistent logit pair the result is identical for every
    action choice.
    """
    if not 0 <= a < ccp.action_count:
        raise ValueError(f"action {a} out of range for {ccp.action_count} actions")
    if v.values.shape != ccp.probs.shape:
        raise ValueError(
            f"conditional values shape {v.values.shape} does not match ccp shape {ccp.probs.shape}")
    column = ccp.probs[:, a]
    if column.min() <= 0.0:
        bad = int(np.argmin(column))
        raise ValueError(f"p({a}|{bad}) is zero; inversion undefined")
    return ValueVector(v.values[:, a] - np.log(column) + EULER_GAMMA, ccp.grid)


_INNER_SOLVERS = ("model_adaptive", "successive_approximation", "exact")


@dataclass
class PolicyIterationReport:
    """Aggregated diagnostics across outer policy-iteration steps."""

    outer_iterations: int = 0
    converged: bool = False
    ccp_changes: List[float] = field(default_factory=list)
    inner_reports: List[Optional[SolverReport]] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def inner_iterations(self) -> List[int]:
        return [r.iterations if r is not None else 0 for r in self.inner_reports]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["outer_iter", "inner_iters", "inner_matvecs",
                             "ccp_change_sup", "elapsed_s"])
            elapsed = 0.0
            for i, (rep, change) in enumerate(zip(self.inner_reports, self.ccp_changes), 1):
                iters = rep.iterations if rep is not None else 0
                mv = rep.matvec_count if rep is not None else 0
                elapsed += rep.wall_time if rep is not None else 0.0
                writer.writerow([i, iters, mv, repr(change), repr(elapsed)])


def policy_iteration(model, inner: str = "model_adaptive",
                     inner_cfg: Optional[SolverConfig] = None,
                     outer_tol: float = 1e-5, max_outer: int = 100,
                     warm_start: bool = False,
                     initial_ccp: Optional[Ccp] = None
                     ) -> Tuple[ValueVector, Ccp, PolicyIterationReport]:
    """Alternate policy valuation and policy improvement to the fixed point.

    Starts from the uniform policy and stops when the sup-norm CCP change
    drops to ``outer_tol``.  ``warm_start=True`` reuses the previous outer
    step's y (model-adaptive) or V (successive approximation) as the next
    initial guess; the default cold-starts every inner solve from zero,
    which is how the benchmark iteration counts are reported.
    """
    if inner not in _INNER_SOLVERS:
        raise ValueError(f"inner must be one of {_INNER_SOLVERS}, got {inner!r}")
    start = time.perf_counter()
    base_cfg = inner_cfg or SolverConfig(tol=1e-7, tol_norm="sup")
    m = model.grid.count
    ccp = initial_ccp or Ccp(np.full((m, model.action_count), 1.0 / model.action_count),
                             model.grid)
    report = PolicyIterationReport()
    prev_y = None
    prev_v = None
    V = ValueVector.zeros(model.grid)
    for outer in range(1, max_outer + 1):
        u, op = assemble_policy_valuation(model, ccp)
        inner_report = None
        if inner == "model_adaptive":
            cfg = SolverConfig(tol=base_cfg.tol, tol_norm=base_cfg.tol_norm,
                               max_iter=base_cfg.max_iter,
                               initial_y=prev_y if warm_start else None)
            V, inner_report = solve_model_adaptive(op, u, cfg)
            if warm_start:
                prev_y = inner_report.final_y
        elif inner == "successive_approximation":
            cfg = SolverConfig(tol=base_cfg.tol, tol_norm=base_cfg.tol_norm,
                               max_iter=max(base_cfg.max_iter, 200_000),
                               initial_v=prev_v if warm_start else None)
            V, inner_report = solve_successive_approximation(op, u, cfg)
            if warm_start:
                prev_v = V.values
        else:
            V = solve_exact(op, u)
        new_ccp, _ = policy_improvement(model, V)
        change = float(np.max(np.abs(new_ccp.probs - ccp.probs)))
        report.inner_reports.append(inner_report)
        report.ccp_changes.append(change)
        ccp = new_ccp
        if change <= outer_tol:
            report.outer_iterations = outer
            report.converged = True
            report.wall_time = time.perf_counter() - start
            return V, ccp, report
    report.outer_iterations = max_outer
    report.converged = False
    report.wall_time = time.perf_counter() - start
    raise RuntimeError(
        f"policy iteration did not converge in {max_outer} outer iterations "
        f"(last ccp change {change:g})")


# ---------------------------------------------------------------------------
# Storable-goods drivers
# ---------------------------------------------------------------------------

@dataclass
class StorableSolution:
    """Solved storable-goods problem: value function, integer consumption
    function C(x, j), and outer-loop diagnostics.  ``quantity_probs`` and
    ``final_y`` warm-start the next solve at nearby parameters."""

    V: ValueVector
    consumption: np.ndarray
    outer_iterations: int
    converged: bool
    wall_time: float = 0.0
    inner_counts: List[int] = field(default_factory=list)
    inner_matvecs: int = 0
    quantity_probs: Optional[np.ndarray] = None
    final_y: Optional[np.ndarray] = None


def storable_policy_loop(model, inner: str = "model_adaptive",
                         inner_cfg: Optional[SolverConfig] = None,
                         policy_tol: float = 1e-4, max_outer: int = 100,
                         warm_start_V: Optional[np.ndarray] = None,
                         warm_start_C: Optional[np.ndarray] = None,
                         warm_start_probs: Optional[np.ndarray] = None,
                         warm_start_y: Optional[np.ndarray] = None
                         ) -> StorableSolution:
    """Outer loop over the consumption function with inner policy iteration.

    For a fixed integer consumption function the purchase-quantity problem
    is a standard discrete choice; its valuation system is solved with the
    chosen inner solver and the quantity CCPs are improved until their
    sup-norm change is below ``policy_tol``.  The consumption function is
    then re-optimized, and the loop stops when it is exactly unchanged.
    Warm starts (previous V, C, CCPs, and the model-adaptive y) speed up
    re-solves at nearby parameters without moving the fixed point.

    Note the flow utility here follows the storable-goods convention
    without the Euler constant, matching the value-iteration drivers below
    so all algorithms share one fixed point.
    """
    if inner not in _INNER_SOLVERS:
        raise ValueError(f"inner must be one of {_INNER_SOLVERS}, got {inner!r}")
    start = time.perf_counter()
    base_cfg = inner_cfg or SolverConfig(tol=1e-8, tol_norm="sup")
    n = model.grid.count
    V = np.zeros(n) if warm_start_V is None else np.asarray(warm_start_V, dtype=float).copy()
    C = model.consumption_update(V) if warm_start_C is None else warm_start_C.copy()
    if warm_start_probs is None:
        # improve once from the starting V so numerically dominated choices
        # carry ~zero weight from the first valuation solve on
        v_choice = model.choice_values(V, C)
        expv = np.exp(v_choice - v_choice.max(axis=1, keepdims=True))
        probs = np.clip(expv / expv.sum(axis=1, keepdims=True), CCP_LOG_FLOOR, None)
    else:
        probs = np.asarray(warm_start_probs, dtype=float).copy()
    prev_y = None if warm_start_y is None else np.asarray(warm_start_y, dtype=float).copy()
    solution = StorableSolution(V=ValueVector(V, model.grid), consumption=C,
                                outer_iterations=0, converged=False)
    for outer in range(1, max_outer + 1):
        flows = model.choice_flow_utilities(C)
        inner_count = 0
        for _ in range(200):
            u_bar = ((probs * flows).sum(axis=1)
                     - (probs * np.log(np.clip(probs, CCP_LOG_FLOOR, None))).sum(axis=1))
            u_vec = ValueVector(u_bar, model.grid)
            op = model.build_policy_operator_for_consumption(
                probs, C, dense=(inner == "exact"))
            if inner == "model_adaptive":
                cfg = SolverConfig(tol=base_cfg.tol, tol_norm=base_cfg.tol_norm,
                                   max_iter=base_cfg.max_iter, initial_y=prev_y)
                V_vec, rep = solve_model_adaptive(op, u_vec, cfg)
                prev_y = rep.final_y
                solution.inner_matvecs += rep.matvec_count + rep.extra_matvecs
            elif inner == "successive_approximation":
                cfg = SolverConfig(tol=base_cfg.tol, tol_norm=base_cfg.tol_norm,
                                   max_iter=max(base_cfg.max_iter, 200_000),
                                   initial_v=V)
                V_vec, rep = solve_successive_approximation(op, u_vec, cfg)
                solution.inner_matvecs += rep.matvec_count
            else:
                V_vec = solve_exact(op, u_vec)
                rep = None
            if rep is not None and not rep.converged:
                raise RuntimeError(
                    f"inner {inner} solve did not reach {base_cfg.tol:g} at "
                    f"outer step {outer}")
            V = V_vec.values
            inner_count += 1
            v_choice = model.choice_values(V, C)
            shifted = v_choice - v_choice.max(axis=1, keepdims=True)
            expv = np.exp(shifted)
            new_probs = np.clip(expv / expv.sum(axis=1, keepdims=True),
                                CCP_LOG_FLOOR, None)
            change = float(np.max(np.abs(new_probs - probs)))
            probs = new_probs
            if change <= policy_tol:
                break
        solution.inner_counts.append(inner_count)
        new_C = model.consumption_update(V)
        if np.array_equal(new_C, C):
            solution.V = ValueVector(V, model.grid)
            solution.consumption = C
            solution.outer_iterations = outer
            solution.converged = True
            solution.wall_time = time.perf_counter() - start
            solution.quantity_probs = probs
            solution.final_y = prev_y
            return solution
        C = new_C
    raise RuntimeError(f"consumption function did not settle in {max_outer} outer iterations")


def value_iteration_driver(model, value_tol: float = 1e-8,
                           max_outer: int = 200, max_inner: int = 5_000_000
                           ) -> StorableSolution:
    """Full value-function convergence per consumption update.

    Inner Bellman iteration runs to ``sup |V_{k+1} - V_k| <= value_tol``
    before each consumption re-optimization; the outer loop stops when the
    integer consumption function is exactly unchanged.
    """
    start = time.perf_counter()
    V = np.zeros(model.grid.count)
    C = model.consumption_update(V)
    inner_counts = []
    for outer in range(1, max_outer + 1):
        for inner in range(1, max_inner + 1):
            V_next = model.bellman_update(V, C)
            gap = float(np.max(np.abs(V_next - V)))
            V = V_next
            if gap <= value_tol:
                break
        inner_counts.append(inner)
        new_C = model.consumption_update(V)
        if np.array_equal(new_C, C):
            return StorableSolution(V=ValueVector(V, model.grid), consumption=C,
                                    outer_iterations=outer, converged=True,
                                    wall_time=time.perf_counter() - start,
                                    inner_counts=inner_counts)
        C = new_C
    raise RuntimeError(f"consumption function did not settle in {max_outer} outer iterations")


def one_step_value_iteration_driver(model, value_tol: float = 1e-8,
                                    max_outer: int = 1_000_000) -> StorableSolution:
    """Single Bellman update and single consumption update per outer step.

    Stops only when the consumption function is unchanged and the value
    update is below ``value_tol`` in the sup-norm, which takes roughly
    1/(1 - beta) times more outer steps than the converged loops.
    """
    start = time.perf_counter()
    V = np.zeros(model.grid.count)
    C = model.consumption_update(V)
    for outer in range(1, max_outer + 1):
        V_next = model.bellman_update(V, C)
        new_C = model.consumption_update(V_next)
        gap = float(np.max(np.abs(V_next - V)))
        unchanged = np.array_equal(new_C, C)
        V, C = V_next, new_C
        if unchanged and gap <= value_tol:
            return StorableSolution(V=ValueVector(V, model.grid), consumption=C,
                                    outer_iterations=outer, converged=True,
                                    wall_time=time.perf_counter() - start)
    raise RuntimeError(f"one-step iteration did not settle in {max_outer} steps")
