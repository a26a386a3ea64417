"""Bus engine replacement model on a 0.125-increment mileage grid.

Each period the agent keeps (a=1) or replaces (a=0) the engine.
Maintenance cost is linear in mileage capped at 25; replacement costs a
flat amount and restarts mileage accumulation from zero.  Mileage
increments follow exponential bins of width 0.125 with the cap state
absorbing the tail, so every transition row telescopes to exactly one.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from ..drivers import EULER_GAMMA
from ..operators import StateGrid, TransitionKernel

__all__ = ["BusEngineModel"]

MILEAGE_CAP = 25.0
MILEAGE_STEP = 0.125


class BusEngineModel:
    """Two-action replacement problem; defaults reproduce the benchmark
    parameterization (theta1=-0.15, theta2=1, RC=-2, beta=0.9)."""

    action_count = 2

    def __init__(self, theta1: float = -0.15, theta2: float = 1.0,
                 replacement_cost: float = -2.0, beta: float = 0.9):
        self.theta1 = theta1
        self.theta2 = theta2
        self.replacement_cost = replacement_cost
        self.beta = beta
        self.mileage = np.arange(0, round(MILEAGE_CAP / MILEAGE_STEP) + 1) * MILEAGE_STEP
        self.grid = StateGrid(self.mileage.reshape(-1, 1))
        self._kernels: Optional[List[TransitionKernel]] = None

    @classmethod
    def from_params(cls, params) -> "BusEngineModel":
        """Build from a flat key=value mapping (keys: theta1, theta2,
        replacement_cost, beta)."""
        return cls(theta1=float(params.get("theta1", -0.15)),
                   theta2=float(params.get("theta2", 1.0)),
                   replacement_cost=float(params.get("replacement_cost", -2.0)),
                   beta=float(params.get("beta", 0.9)))

    @property
    def n_states(self) -> int:
        return self.grid.count

    def state_index(self, mileage: float) -> int:
        idx = round(mileage / MILEAGE_STEP)
        if not (0 <= idx < self.n_states) or abs(idx * MILEAGE_STEP - mileage) > 1e-9:
            raise ValueError(f"mileage {mileage} is not on the 0.125 grid up to 25")
        return idx

    def flow_utility(self, x_index: int, a: int) -> float:
        if a == 0:
            return self.replacement_cost
        return self.theta1 * min(self.mileage[x_index], MILEAGE_CAP)

    def flow_utility_matrix(self) -> np.ndarray:
        keep = self.theta1 * np.minimum(self.mileage, MILEAGE_CAP)
        return np.column_stack([np.full(self.n_states, self.replacement_cost), keep])

    def transition_row(self, x_index: int, a: int) -> np.ndarray:
        """Distribution of next mileage given current mileage and action."""
        n = self.n_states
        origin = 0.0 if a == 0 else self.mileage[x_index]
        row = np.zeros(n)
        start = 0 if a == 0 else x_index
        increments = self.mileage[start:n - 1] - origin
        row[start:n - 1] = (np.exp(-self.theta2 * increments)
                            - np.exp(-self.theta2 * (increments + MILEAGE_STEP)))
        row[n - 1] = np.exp(-self.theta2 * (MILEAGE_CAP - origin))
        return row

    def per_action_kernels(self) -> List[TransitionKernel]:
        if self._kernels is None:
            n = self.n_states
            replace = np.tile(self.transition_row(0, 0), (n, 1))
            keep = np.vstack([self.transition_row(i, 1) for i in range(n)])
            self._kernels = [TransitionKernel(replace, self.grid),
                             TransitionKernel(keep, self.grid)]
        return self._kernels

    def expected_values(self, values: np.ndarray) -> np.ndarray:
        kernels = self.per_action_kernels()
        return np.column_stack([k.matvec(values) for k in kernels])

    def solve_dp(self, tol: float = 1e-10, max_iter: int = 500_000) -> np.ndarray:
        """Integrated value function by value iteration on the logsumexp
        Bellman operator (includes the Euler constant)."""
        flows = self.flow_utility_matrix()
        V = np.zeros(self.n_states)
        for _ in range(max_iter):
            v = flows + self.beta * self.expected_values(V)
            top = v.max(axis=1, keepdims=True)
            V_next = EULER_GAMMA + top[:, 0] + np.log(np.exp(v - top).sum(axis=1))
            gap = np.max(np.abs(V_next - V))
            V = V_next
            if gap <= tol:
                return V
        raise RuntimeError(f"value iteration did not reach {tol:g} in {max_iter} iterations")

    def true_ccp(self, V: Optional[np.ndarray] = None) -> np.ndarray:
        """Logit CCPs implied by the DP solution (or a supplied V)."""
        if V is None:
            V = self.solve_dp()
        v = self.flow_utility_matrix() + self.beta * self.expected_values(V)
        shifted = v - v.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        return expv / expv.sum(axis=1, keepdims=True)
