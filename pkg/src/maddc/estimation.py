"""Adaptive random-walk MCMC with vanishing adaptation, plus the simulated
likelihood and forward panel simulator it drives.

The proposal is N(theta_t, lambda_t * Sigma_t).  After each step the scale,
running mean, and running covariance are updated with the decaying weight
gamma_t = (1 + t)^(-delta), which tunes the acceptance rate toward the
target while preserving ergodicity.  The likelihood treats inventory as
observed along a path simulated from zero under the candidate parameters,
dropping an initial burn-in share of periods.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .drivers import storable_policy_loop
from .operators import stationary_distribution
from .solvers import SolverConfig

__all__ = [
    "McmcConfig",
    "McmcState",
    "adaptive_mh_step",
    "frozen_random_walk_chain",
    "Panel",
    "forward_simulate",
    "simulated_log_likelihood",
    "McmcResult",
    "run_mcmc",
    "save_panel_csv",
    "load_panel_csv",
]

LOG_PROB_FLOOR = 1e-300


@dataclass
class McmcConfig:
    """Adaptive Metropolis-Hastings settings.

    Defaults follow the benchmark protocol: scale 2.38^2/4 for four
    parameters, target acceptance 0.3, adaptation weight decay 0.5, and a
    N(0, 100) prior per parameter.
    """

    total_draws: int = 10_000
    burn_in: int = 8_000
    lambda0: float = 2.38**2 / 4.0
    target_accept: float = 0.3
    adapt_decay: float = 0.5
    prior_mean: float = 0.0
    prior_variance: float = 100.0
    seed: int = 0
    adapt_after_burnin: bool = False

    def __post_init__(self):
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError(f"target acceptance must be in (0, 1), got {self.target_accept}")
        if not 0.0 < self.adapt_decay <= 1.0:
            raise ValueError(f"adaptation decay must be in (0, 1], got {self.adapt_decay}")
        if not 0 <= self.burn_in < self.total_draws:
            raise ValueError(
                f"burn-in {self.burn_in} must be below total draws {self.total_draws}")
        if self.prior_variance <= 0:
            raise ValueError("prior variance must be positive")

    def log_prior(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        centered = theta - self.prior_mean
        return float(-0.5 * (centered @ centered) / self.prior_variance
                     - 0.5 * theta.size * math.log(2 * math.pi * self.prior_variance))


@dataclass
class McmcState:
    """Chain position plus the adaptation statistics (mean, covariance, scale)."""

    theta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    lam: float
    t: int = 0
    log_posterior: Optional[float] = None

    @staticmethod
    def initial(theta0, lambda0: float) -> "McmcState":
        theta0 = np.asarray(theta0, dtype=float)
        return McmcState(theta=theta0.copy(), mu=theta0.copy(),
                         sigma=np.eye(theta0.size), lam=float(lambda0))


def _proposal_cholesky(sigma: np.ndarray, lam: float) -> np.ndarray:
    scaled = lam * sigma
    try:
        return np.linalg.cholesky(scaled)
    except np.linalg.LinAlgError:
        # running covariance can collapse to rank < d early in the chain
        # (e.g. a first rejection with mu_0 = theta_0 zeroes it), so the
        # jitter needs an absolute floor
        jitter = 1e-8 * max(np.trace(scaled) / scaled.shape[0], 1.0)
        try:
            return np.linalg.cholesky(scaled + jitter * np.eye(scaled.shape[0]))
        except np.linalg.LinAlgError as err:
            raise np.linalg.LinAlgError(
                f"proposal covariance not factorizable even with jitter {jitter:g}"
            ) from err


def adaptive_mh_step(state: McmcState, log_posterior: Callable[[np.ndarray], float],
                     cfg: McmcConfig, rng: np.random.Generator,
                     adapt: bool = True) -> Tuple[McmcState, bool, float]:
    """One Metropolis-Hastings step with vanishing adaptation.

    Draws a candidate from N(theta_t, lambda_t Sigma_t), accepts with the
    usual ratio in log space, then (when ``adapt``) updates
    ``lambda_{t+1} = exp(gamma_t (alpha - alpha*)) lambda_t``,
    ``mu_{t+1} = mu_t + gamma_t (theta_{t+1} - mu_t)``, and
    ``Sigma_{t+1} = Sigma_t + gamma_t ((theta_{t+1} - mu_t)(theta_{t+1} -
    mu_t)' - Sigma_t)`` with ``gamma_t = (1 + t)^(-delta)``.  A candidate
    whose log posterior is NaN is rejected with a warning.

    Returns the new state, the acceptance flag, and the acceptance
    probability used in the scale update.
    """
    theta = state.theta
    chol = _proposal_cholesky(state.sigma, state.lam)
    candidate = theta + chol @ rng.standard_normal(theta.size)

    if state.log_posterior is None:
        state.log_posterior = float(log_posterior(theta))
    current_lp = state.log_posterior
    candidate_lp = float(log_posterior(candidate))
    if math.isnan(candidate_lp):
        warnings.warn(f"log posterior returned NaN at draw {state.t}; candidate rejected")
        accept_prob = 0.0
    elif candidate_lp == -math.inf:
        accept_prob = 0.0
    else:
        accept_prob = min(1.0, math.exp(min(0.0, candidate_lp - current_lp)))

    accepted = bool(rng.random() < accept_prob)
    new_theta = candidate if accepted else theta
    new_lp = candidate_lp if accepted else current_lp

    if adapt:
        gamma = (1.0 + state.t) ** (-cfg.adapt_decay)
        new_lam = math.exp(gamma * (accept_prob - cfg.target_accept)) * state.lam
        centered = new_theta - state.mu
        new_mu = state.mu + gamma * centered
        new_sigma = state.sigma + gamma * (np.outer(centered, centered) - state.sigma)
        new_sigma = 0.5 * (new_sigma + new_sigma.T)
    else:
        new_lam, new_mu, new_sigma = state.lam, state.mu.copy(), state.sigma.copy()

    return (McmcState(theta=np.array(new_theta, dtype=float), mu=new_mu,
                      sigma=new_sigma, lam=new_lam, t=state.t + 1,
                      log_posterior=new_lp),
            accepted, accept_prob)


def frozen_random_walk_chain(log_density: Callable[[np.ndarray], float],
                             theta0, covariance, lam: float, n_steps: int,
                             seed: int, thin: int = 1) -> np.ndarray:
    """Plain random-walk Metropolis with a fixed proposal (no adaptation).

    Used for detailed-balance checks against known targets; returns the
    thinned draws as an (n_kept, d) array.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    d = theta.size
    chol = np.linalg.cholesky(lam * np.asarray(covariance, dtype=float))
    rng = np.random.default_rng(seed)
    increments = rng.standard_normal((n_steps, d)) @ chol.T
    uniforms = rng.random(n_steps)
    current = log_density(theta)
    kept = np.empty((n_steps // thin, d))
    n_kept = 0
    for step in range(n_steps):
        candidate = theta + increments[step]
        cand_lp = log_density(candidate)
        if math.log(uniforms[step]) < cand_lp - current:
            theta = candidate
            current = cand_lp
        if (step + 1) % thin == 0:
            kept[n_kept] = theta
            n_kept += 1
    return kept[:n_kept]


# ---------------------------------------------------------------------------
# Panels and simulated likelihood
# ---------------------------------------------------------------------------

@dataclass
class Panel:
    """Simulated household panel over the storable-goods state space.

    All arrays have shape (n_households, n_periods): the full state index,
    the chosen quantity index (position in the pack-size tuple), the
    integer consumption, and the beginning-of-period inventory.
    """

    state_index: np.ndarray
    quantity_index: np.ndarray
    consumption: np.ndarray
    inventory: np.ndarray
    seed: int = 0

    def __post_init__(self):
        shape = self.state_index.shape
        for name in ("quantity_index", "consumption", "inventory"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"panel field {name} has shape "
                                 f"{getattr(self, name).shape}, expected {shape}")

    @property
    def n_households(self) -> int:
        return self.state_index.shape[0]

    @property
    def n_periods(self) -> int:
        return self.state_index.shape[1]


def save_panel_csv(panel: Panel, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["household", "period", "state_index", "quantity",
                         "consumption", "inventory"])
        for h in range(panel.n_households):
            for t in range(panel.n_periods):
                writer.writerow([h, t, panel.state_index[h, t],
                                 panel.quantity_index[h, t],
                                 panel.consumption[h, t], panel.inventory[h, t]])


def load_panel_csv(path) -> Panel:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["household", "period", "state_index", "quantity",
                    "consumption", "inventory"]
        if header != expected:
            raise ValueError(f"unexpected panel CSV header: {header}")
        rows = [[int(v) for v in row] for row in reader]
    if not rows:
        raise ValueError("panel CSV is empty")
    data = np.asarray(rows)
    n_h = data[:, 0].max() + 1
    n_t = data[:, 1].max() + 1
    fields = [np.zeros((n_h, n_t), dtype=np.int64) for _ in range(4)]
    for row in data:
        h, t = row[0], row[1]
        for k in range(4):
            fields[k][h, t] = row[2 + k]
    return Panel(*fields)


def forward_simulate(model, values: np.ndarray, consumption: np.ndarray,
                     n_households: int, n_periods: int, seed: int) -> Panel:
    """Simulate households from the solved policy, reproducibly under seed.

    Quantities are drawn from the logit choice probabilities implied by
    (V, C); consumption follows C; inventory advances deterministically and
    the inclusive-value state moves on its exogenous chain.  Initial
    inventory is zero and initial inclusive-value states are drawn from the
    chain's stationary distribution.
    """
    if n_households < 1 or n_periods < 1:
        raise ValueError("need at least one household and one period")
    rng = np.random.default_rng(seed)
    probs = model.quantity_ccp(values, consumption)
    prob_cum = np.cumsum(probs, axis=1)
    iv_cum = np.cumsum(model.iv_kernel.matrix, axis=1)
    iv_stationary = stationary_distribution(model.iv_kernel)
    iv_state = np.searchsorted(np.cumsum(iv_stationary), rng.random(n_households))
    inventory = np.zeros(n_households, dtype=np.int64)
    packs = np.asarray(model.packs)

    state_idx = np.empty((n_households, n_periods), dtype=np.int64)
    quantity = np.empty_like(state_idx)
    consumed = np.empty_like(state_idx)
    inv_out = np.empty_like(state_idx)
    for t in range(n_periods):
        x = iv_state * model.n_inv + inventory
        state_idx[:, t] = x
        inv_out[:, t] = inventory
        draw = rng.random(n_households)
        choice = (prob_cum[x] < draw[:, None]).sum(axis=1)
        choice = np.minimum(choice, probs.shape[1] - 1)
        quantity[:, t] = choice
        c = consumption[x, choice]
        consumed[:, t] = c
        inventory = inventory + packs[choice] - c
        iv_draw = rng.random(n_households)
        iv_state = (iv_cum[iv_state] < iv_draw[:, None]).sum(axis=1)
        iv_state = np.minimum(iv_state, model.n_iv - 1)
    return Panel(state_idx, quantity, consumed, inv_out, seed=seed)


def _solve_at(model, theta, warm_start=None, inner_tol: float = 1e-8):
    candidate = model.with_theta(theta)
    cfg = SolverConfig(tol=inner_tol, tol_norm="sup")
    kwargs = {}
    if warm_start is not None:
        kwargs = dict(warm_start_V=warm_start.V.values,
                      warm_start_C=warm_start.consumption,
                      warm_start_probs=warm_start.quantity_probs,
                      warm_start_y=warm_start.final_y)
    return candidate, storable_policy_loop(candidate, inner="model_adaptive",
                                           inner_cfg=cfg, **kwargs)


def simulated_log_likelihood(model, data: Panel, theta, seed: int = 0,
                             n_paths: int = 1, drop_fraction: float = 0.3,
                             warm_start=None, return_solution: bool = False):
    """Log likelihood of observed quantity choices at candidate parameters.

    The dynamic problem is solved at ``theta``; inventory is then simulated
    from zero along each household's observed quantities and treated as
    observed, with the first ``drop_fraction`` of periods discarded.  With
    ``n_paths > 1`` additional paths start from random initial inventories
    (common random numbers under ``seed``) and per-period choice
    probabilities are averaged before taking logs.
    """
    n_obs_periods = data.n_periods
    n_drop = int(drop_fraction * n_obs_periods)
    if data.n_households < 1 or n_obs_periods - n_drop < 1:
        raise ValueError(
            f"no retained periods: {n_obs_periods} periods with {n_drop} dropped")
    candidate, solution = _solve_at(model, theta, warm_start=warm_start)
    if not solution.converged:
        raise RuntimeError(f"dynamic program did not converge at theta={theta}")
    probs = candidate.quantity_ccp(solution.V.values, solution.consumption)
    packs = np.asarray(candidate.packs)
    iv_obs = data.state_index // candidate.n_inv
    rng = np.random.default_rng(seed)

    total = np.zeros((data.n_households, n_obs_periods - n_drop))
    for path in range(n_paths):
        if path == 0:
            inventory = np.zeros(data.n_households, dtype=np.int64)
        else:
            inventory = rng.integers(0, candidate.i_max + 1, size=data.n_households)
        path_probs = np.empty((data.n_households, n_obs_periods - n_drop))
        for t in range(n_obs_periods):
            x = iv_obs[:, t] * candidate.n_inv + inventory
            choice = data.quantity_index[:, t]
            if t >= n_drop:
                path_probs[:, t - n_drop] = probs[x, choice]
            c = solution.consumption[x, choice]
            inventory = np.clip(inventory + packs[choice] - c, 0, candidate.i_max)
        total += path_probs
    avg = total / n_paths
    loglik = float(np.log(np.clip(avg, LOG_PROB_FLOOR, None)).sum())
    if return_solution:
        return loglik, solution
    return loglik


@dataclass
class McmcResult:
    """Chain draws and post-burn-in summaries."""

    draws: np.ndarray
    log_posteriors: np.ndarray
    accepted: np.ndarray
    lambdas: np.ndarray
    burn_in: int

    @property
    def posterior_mean(self) -> np.ndarray:
        return self.draws[self.burn_in:].mean(axis=0)

    @property
    def posterior_sd(self) -> np.ndarray:
        return self.draws[self.burn_in:].std(axis=0, ddof=1)

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted[self.burn_in:].mean())

    def write_csv(self, path):
        k = self.draws.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["draw"] + [f"theta{i + 1}" for i in range(k)]
                            + ["log_post", "accepted", "lambda"])
            for i in range(self.draws.shape[0]):
                writer.writerow([i] + [repr(v) for v in self.draws[i]]
                                + [repr(self.log_posteriors[i]),
                                   int(self.accepted[i]), repr(self.lambdas[i])])


def run_mcmc(model, data: Panel, cfg: McmcConfig,
             initial_theta=None, inner_tol: float = 1e-8) -> McmcResult:
    """Adaptive MCMC over the dynamic utility parameters.

    Each candidate evaluation solves the dynamic program warm-started from
    the previously accepted parameters' solution, then evaluates the
    simulated likelihood plus the normal prior.  Adaptation runs through
    burn-in and freezes afterwards unless ``cfg.adapt_after_burnin``.
    """
    theta0 = np.asarray(initial_theta if initial_theta is not None else model.theta,
                        dtype=float)
    rng = np.random.default_rng(cfg.seed)
    warm = {"solution": None}

    def log_posterior(theta):
        try:
            loglik, solution = simulated_log_likelihood(
                model, data, theta, seed=cfg.seed, warm_start=warm["solution"],
                return_solution=True)
        except RuntimeError:
            return -math.inf
        warm["candidate"] = solution
        return loglik + cfg.log_prior(theta)

    state = McmcState.initial(theta0, cfg.lambda0)
    state.log_posterior = log_posterior(theta0)
    warm["solution"] = warm.get("candidate")

    draws = np.empty((cfg.total_draws, theta0.size))
    log_posts = np.empty(cfg.total_draws)
    accepted = np.zeros(cfg.total_draws, dtype=bool)
    lambdas = np.empty(cfg.total_draws)
    for t in range(cfg.total_draws):
        adapt = cfg.adapt_after_burnin or t < cfg.burn_in
        state, was_accepted, _ = adaptive_mh_step(state, log_posterior, cfg, rng,
                                                  adapt=adapt)
        if was_accepted and "candidate" in warm:
            warm["solution"] = warm["candidate"]
        draws[t] = state.theta
        log_posts[t] = state.log_posterior
        accepted[t] = was_accepted
        lambdas[t] = state.lam
    return McmcResult(draws=draws, log_posteriors=log_posts, accepted=accepted,
                      lambdas=lambdas, burn_in=cfg.burn_in)
