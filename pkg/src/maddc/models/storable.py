"""Storable-goods demand model: inventory plus an inclusive-value process.

A household chooses a purchase quantity j from a fixed set of pack sizes
and an integer consumption level c.  Utility is quadratic in consumption
and next-period inventory (normalized by the inventory cap), has a fixed
cost of purchasing, and adds the inclusive value of the static brand
choice for the chosen quantity.  The state is (inclusive values, inventory);
inventory moves deterministically by I' = I + j - c while the inclusive
values follow an exogenous Markov chain.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..discretization import Ar1Spec, tauchen, tensor_product
from ..operators import StateGrid, TransitionKernel

__all__ = [
    "inclusive_value",
    "conditional_logit_share",
    "storable_flow_utility",
    "StorableGoodsModel",
    "build_desk_storable",
]

DEFAULT_PACKS = (0, 23, 40, 64)
DEFAULT_I_MAX = 80
# household-size-1 benchmark estimates (theta1, theta2, theta3, theta4)
DEFAULT_THETA = (2.020, -13.768, -3.197, -4.184)


def _brand_utilities(prices: np.ndarray, theta5: float, xi: np.ndarray,
                     delta: np.ndarray, j: float) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    if prices.shape != (xi.size, delta.size):
        raise ValueError(
            f"prices shape {prices.shape} does not match {xi.size} brands x "
            f"{delta.size} variants")
    utilities = theta5 * prices + j * xi[:, None] + j * delta[None, :]
    return utilities[np.isfinite(prices)]


def inclusive_value(prices, theta5: float, xi, delta, j: float) -> float:
    """Log-sum-exp utility of the static brand choice at quantity j.

    ``prices`` is a (brands x variants) matrix for this quantity; NaN marks
    products not offered.  Raises if nothing is offered.
    """
    offered = _brand_utilities(prices, theta5, xi, delta, j)
    if offered.size == 0:
        raise ValueError(f"no products offered at quantity {j}")
    top = offered.max()
    return float(top + np.log(np.exp(offered - top).sum()))


def conditional_logit_share(prices, theta5: float, xi, delta, j: float) -> np.ndarray:
    """Softmax purchase shares over the offered (brand, variant) pairs."""
    offered = _brand_utilities(prices, theta5, xi, delta, j)
    if offered.size == 0:
        raise ValueError(f"no products offered at quantity {j}")
    shifted = np.exp(offered - offered.max())
    return shifted / shifted.sum()


def storable_flow_utility(c: int, inventory: int, j: int, omega_j: float,
                          theta: Sequence[float], i_max: int = DEFAULT_I_MAX) -> float:
    """Per-period utility of consuming c after buying quantity j.

    Consumption and inventory enter normalized by the cap:
    ``theta1 (c/I) + theta2 (c/I)^2 + theta3 (I'/I)^2 + theta4 1{j>0} +
    omega_j`` with I' = inventory + j - c.
    """
    c_min, c_max = max(0, inventory + j - i_max), inventory + j
    if not c_min <= c <= c_max:
        raise ValueError(
            f"consumption {c} outside [{c_min}, {c_max}] at inventory {inventory}, quantity {j}")
    next_inventory = inventory + j - c
    if not 0 <= next_inventory <= i_max:
        raise ValueError(
            f"next inventory {next_inventory} outside [0, {i_max}] at "
            f"(inventory {inventory}, quantity {j}, consumption {c})")
    t1, t2, t3, t4 = theta
    share = c / i_max
    value = t1 * share + t2 * share**2 + t3 * (next_inventory / i_max) ** 2
    if j > 0:
        value += t4
    return float(value + omega_j)


class StorableValuationOperator:
    """Policy-mixed discounted operator exploiting the kernel factorization.

    The transition is (IV chain) tensor (point mass at I + j - C), so a
    matvec costs one small IV-kernel product plus per-quantity gathers
    instead of a dense n^2 product.  Matches the dense mixed kernel to
    machine precision.
    """

    def __init__(self, model: "StorableGoodsModel", probs: np.ndarray,
                 consumption: np.ndarray):
        self.beta = model.beta
        self.grid = model.grid
        self.n = model.n_states
        self._model = model
        self._probs = np.asarray(probs, dtype=float)
        self._next_inv = np.empty((model.n_states, model.action_count), dtype=np.int64)
        for jq, j in enumerate(model.packs):
            self._next_inv[:, jq] = model._inventory + j - consumption[:, jq]
        if self._next_inv.min() < 0 or self._next_inv.max() > model.i_max:
            raise ValueError("consumption function leaves the inventory bounds")

    def apply(self, v: np.ndarray) -> np.ndarray:
        m = self._model
        integrated = m.iv_kernel.matvec(v.reshape(m.n_iv, m.n_inv))
        out = np.zeros(self.n)
        for jq in range(m.action_count):
            out += self._probs[:, jq] * integrated[m._iv_index, self._next_inv[:, jq]]
        return self.beta * out

    def apply_adjoint(self, w: np.ndarray) -> np.ndarray:
        m = self._model
        moved = np.zeros((m.n_iv, m.n_inv))
        for jq in range(m.action_count):
            np.add.at(moved, (m._iv_index, self._next_inv[:, jq]),
                      self._probs[:, jq] * w)
        return self.beta * m.iv_kernel.rmatvec(moved).ravel()


class StorableGoodsModel:
    """Inventory x inclusive-value dynamic demand problem.

    ``iv_kernel`` is the exogenous Markov chain over inclusive-value states
    and ``omega`` holds the inclusive value of each positive pack size at
    each of those states, shape (n_iv, len(packs) - 1).  State indices run
    inclusive-value-major: x = iv_index * (i_max + 1) + inventory.
    """

    def __init__(self, iv_kernel: TransitionKernel, omega: np.ndarray,
                 theta: Sequence[float] = DEFAULT_THETA,
                 packs: Sequence[int] = DEFAULT_PACKS,
                 i_max: int = DEFAULT_I_MAX, beta: float = 0.99):
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        self.packs = tuple(int(j) for j in packs)
        if self.packs[0] != 0 or sorted(self.packs) != list(self.packs):
            raise ValueError(f"pack sizes must be increasing and start at 0, got {self.packs}")
        if omega.shape != (iv_kernel.size, len(self.packs) - 1):
            raise ValueError(
                f"omega shape {omega.shape} does not match ({iv_kernel.size}, "
                f"{len(self.packs) - 1})")
        self.iv_kernel = iv_kernel
        self.theta = tuple(float(t) for t in theta)
        self.i_max = int(i_max)
        self.beta = float(beta)
        self.n_iv = iv_kernel.size
        self.n_inv = self.i_max + 1
        # omega for j=0 is zero (no purchase, no brand choice)
        self.omega_by_choice = np.column_stack([np.zeros(self.n_iv), omega])
        points = np.column_stack([
            np.repeat(iv_kernel.grid.points, self.n_inv, axis=0),
            np.tile(np.arange(self.n_inv, dtype=float), self.n_iv),
        ])
        self.grid = StateGrid(points)
        self._iv_index = np.repeat(np.arange(self.n_iv), self.n_inv)
        self._inventory = np.tile(np.arange(self.n_inv), self.n_iv)

    @property
    def action_count(self) -> int:
        return len(self.packs)

    @property
    def n_states(self) -> int:
        return self.n_iv * self.n_inv

    def with_theta(self, theta: Sequence[float]) -> "StorableGoodsModel":
        """Same state space and inclusive-value process, new utility parameters."""
        return StorableGoodsModel(self.iv_kernel, self.omega_by_choice[:, 1:],
                                  theta=theta, packs=self.packs,
                                  i_max=self.i_max, beta=self.beta)

    def state_index(self, iv_index: int, inventory: int) -> int:
        if not 0 <= inventory <= self.i_max:
            raise ValueError(f"inventory {inventory} outside [0, {self.i_max}]")
        return iv_index * self.n_inv + inventory

    def split_index(self, x_index) -> Tuple[np.ndarray, np.ndarray]:
        x_index = np.asarray(x_index)
        return x_index // self.n_inv, x_index % self.n_inv

    def _consumption_part(self, c, next_inventory):
        t1, t2, t3, _ = self.theta
        share = c / self.i_max
        return t1 * share + t2 * share**2 + t3 * (next_inventory / self.i_max) ** 2

    def _discounted_iv_expectation(self, values: np.ndarray) -> np.ndarray:
        """W[iv, I'] = E[V | iv, I'] integrating only the exogenous chain."""
        return self.iv_kernel.matvec(values.reshape(self.n_iv, self.n_inv))

    def consumption_update(self, values: np.ndarray) -> np.ndarray:
        """Integer argmax consumption C(x, j); ties go to the lowest c.

        For each quantity the feasible set maps one-to-one to the landing
        inventory I' = I + j - c in [0, i_max] with c >= 0, so the argmax
        runs over I' and picks the highest feasible I' among ties.
        """
        w = self._discounted_iv_expectation(np.asarray(values, dtype=float))
        inventories = np.arange(self.n_inv)
        consumption = np.empty((self.n_states, self.action_count), dtype=np.int64)
        for jq, j in enumerate(self.packs):
            c_candidates = (inventories[:, None] + j) - inventories[None, :]
            feasible = c_candidates >= 0
            utility = np.where(
                feasible,
                self._consumption_part(np.maximum(c_candidates, 0), inventories[None, :]),
                -np.inf)
            objective = utility[None, :, :] + self.beta * w[:, None, :]
            # scan I' downward so argmax ties resolve to the lowest consumption
            best_rev = objective[:, :, ::-1].argmax(axis=2)
            best_next = self.n_inv - 1 - best_rev
            consumption[:, jq] = ((inventories[None, :] + j) - best_next).ravel()
        return consumption

    def choice_flow_utilities(self, consumption: np.ndarray) -> np.ndarray:
        """u(x, j) = U(C(x,j), I, j) + omega_j, without the discount term."""
        t4 = self.theta[3]
        flows = np.empty((self.n_states, self.action_count))
        for jq, j in enumerate(self.packs):
            c = consumption[:, jq]
            next_inv = self._inventory + j - c
            flows[:, jq] = self._consumption_part(c, next_inv)
            if j > 0:
                flows[:, jq] += t4
            flows[:, jq] += self.omega_by_choice[self._iv_index, jq]
        return flows

    def choice_values(self, values: np.ndarray, consumption: np.ndarray) -> np.ndarray:
        """v(x, j) = u(x, j) + beta E[V | x, C(x,j), j]."""
        w = self._discounted_iv_expectation(np.asarray(values, dtype=float))
        flows = self.choice_flow_utilities(consumption)
        out = np.empty_like(flows)
        for jq, j in enumerate(self.packs):
            next_inv = self._inventory + j - consumption[:, jq]
            out[:, jq] = flows[:, jq] + self.beta * w[self._iv_index, next_inv]
        return out

    def bellman_update(self, values: np.ndarray, consumption: np.ndarray) -> np.ndarray:
        """Logsumexp over quantities at the given consumption function."""
        v = self.choice_values(values, consumption)
        top = v.max(axis=1, keepdims=True)
        return top[:, 0] + np.log(np.exp(v - top).sum(axis=1))

    def quantity_ccp(self, values: np.ndarray, consumption: np.ndarray) -> np.ndarray:
        v = self.choice_values(values, consumption)
        expv = np.exp(v - v.max(axis=1, keepdims=True))
        return expv / expv.sum(axis=1, keepdims=True)

    def _mixed_matrix(self, probs: np.ndarray, consumption: np.ndarray) -> np.ndarray:
        n = self.n_states
        matrix = np.zeros((n, n))
        rows = np.arange(n)
        kiv = self.iv_kernel.matrix
        for jq, j in enumerate(self.packs):
            next_inv = self._inventory + j - consumption[:, jq]
            for iv_next in range(self.n_iv):
                cols = iv_next * self.n_inv + next_inv
                matrix[rows, cols] += probs[:, jq] * kiv[self._iv_index, iv_next]
        return matrix

    def build_policy_operator_for_consumption(self, probs: np.ndarray,
                                              consumption: np.ndarray,
                                              dense: bool = False):
        """Structured operator by default; ``dense=True`` materializes the
        mixed kernel (needed by the direct solver and for cross-checks)."""
        if not dense:
            return StorableValuationOperator(self, probs, consumption)
        from ..operators import DiscountedOperator
        kernel = TransitionKernel(self._mixed_matrix(probs, consumption), self.grid)
        return DiscountedOperator(self.beta, kernel)

    def per_action_kernels_for_consumption(self, consumption: np.ndarray
                                           ) -> List[TransitionKernel]:
        """One kernel per quantity: IV chain tensor a point mass at I + j - C."""
        kernels = []
        n = self.n_states
        rows = np.arange(n)
        kiv = self.iv_kernel.matrix
        for jq, j in enumerate(self.packs):
            matrix = np.zeros((n, n))
            next_inv = self._inventory + j - consumption[:, jq]
            for iv_next in range(self.n_iv):
                matrix[rows, iv_next * self.n_inv + next_inv] = kiv[self._iv_index, iv_next]
            kernels.append(TransitionKernel(matrix, self.grid))
        return kernels

    def valuation_model(self, consumption: np.ndarray) -> "_FixedConsumptionModel":
        """DdcModel adapter for a frozen consumption function."""
        return _FixedConsumptionModel(self, consumption)


class _FixedConsumptionModel:
    """Generic-driver view of the storable model at one consumption function."""

    def __init__(self, model: StorableGoodsModel, consumption: np.ndarray):
        self._model = model
        self._consumption = consumption
        self.grid = model.grid
        self.beta = model.beta
        self.action_count = model.action_count

    def flow_utility_matrix(self) -> np.ndarray:
        return self._model.choice_flow_utilities(self._consumption)

    def flow_utility(self, x_index: int, a: int) -> float:
        return float(self.flow_utility_matrix()[x_index, a])

    def per_action_kernels(self) -> List[TransitionKernel]:
        return self._model.per_action_kernels_for_consumption(self._consumption)

    def expected_values(self, values: np.ndarray) -> np.ndarray:
        model = self._model
        w = model._discounted_iv_expectation(values)
        out = np.empty((model.n_states, model.action_count))
        for jq, j in enumerate(model.packs):
            next_inv = model._inventory + j - self._consumption[:, jq]
            out[:, jq] = w[model._iv_index, next_inv]
        return out

    def build_policy_operator(self, ccp: np.ndarray):
        return self._model.build_policy_operator_for_consumption(ccp, self._consumption)


def build_desk_storable(iv_bins: int = 3, i_max: int = DEFAULT_I_MAX,
                        theta: Sequence[float] = DEFAULT_THETA,
                        packs: Sequence[int] = DEFAULT_PACKS,
                        beta: float = 0.99,
                        iv_means: Optional[Sequence[float]] = None,
                        iv_rho: float = 0.6, iv_sd: float = 1.0,
                        tauchen_width: float = 2.0,
                        size_cap: int = 200_000) -> StorableGoodsModel:
    """Synthetic storable-goods instance with independent AR(1) inclusive values.

    Each positive pack size gets its own chain with persistence ``iv_rho``
    and stationary dispersion ``iv_sd``; the joint inclusive-value state is
    their tensor product (``iv_bins`` per quantity).  The default mean of 4
    makes purchases frequent enough for informative synthetic panels.
    """
    if iv_bins < 1:
        raise ValueError(f"need at least one inclusive-value bin, got {iv_bins}")
    n_quant = len(packs) - 1
    means = [4.0] * n_quant if iv_means is None else list(iv_means)
    if len(means) != n_quant:
        raise ValueError(f"need {n_quant} inclusive-value means, got {len(means)}")
    total_states = (iv_bins ** n_quant) * (i_max + 1)
    if total_states > size_cap:
        raise ValueError(f"{total_states} states is above the cap {size_cap}")
    if iv_bins == 1:
        iv_grid = StateGrid(np.array([means]))
        iv_kernel = TransitionKernel(np.ones((1, 1)), iv_grid)
    else:
        chains = []
        innovation_sd = iv_sd * np.sqrt(1.0 - iv_rho**2)
        for mean in means:
            spec = Ar1Spec(mean * (1.0 - iv_rho), iv_rho, innovation_sd)
            chains.append(tauchen(spec, iv_bins, tauchen_width))
        _, iv_kernel = tensor_product(chains)
    omega = iv_kernel.grid.points
    return StorableGoodsModel(iv_kernel, omega, theta=theta, packs=packs,
                              i_max=i_max, beta=beta)


def desk_storable_from_params(params) -> StorableGoodsModel:
    """Build the synthetic instance from a flat key=value mapping (keys:
    iv_bins, i_max, beta, theta/packs/iv_means as comma lists, iv_rho,
    iv_sd, tauchen_width)."""
    from ..params import floats_from
    packs = tuple(int(j) for j in floats_from(params, "packs", DEFAULT_PACKS))
    means = (floats_from(params, "iv_means", ())
             if "iv_means" in params else None)
    return build_desk_storable(
        iv_bins=int(params.get("iv_bins", 3)),
        i_max=int(params.get("i_max", DEFAULT_I_MAX)),
        theta=floats_from(params, "theta", DEFAULT_THETA),
        packs=packs,
        beta=float(params.get("beta", 0.99)),
        iv_means=means,
        iv_rho=float(params.get("iv_rho", 0.6)),
        iv_sd=float(params.get("iv_sd", 1.0)),
        tauchen_width=float(params.get("tauchen_width", 2.0)))
