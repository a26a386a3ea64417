"""Benchmark command-line harness.

Wires the models, drivers, and solvers into the four experiments
(bus-demo, entry-exit, storable-solve, mcmc-run) and writes
machine-readable CSV artifacts.  Result CSVs are deterministic under a
fixed config and seed; wall-clock numbers go to ``timings.csv`` and the
run timestamp to ``run_metadata.txt`` so everything else reproduces
bitwise.

Exit codes: 0 on success, 1 on usage errors, 2 when a solver fails to
converge.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List

import numpy as np

from .drivers import (Ccp, assemble_policy_valuation,
                      one_step_value_iteration_driver, policy_iteration,
                      storable_policy_loop, value_iteration_driver)
from .estimation import (McmcConfig, forward_simulate, run_mcmc,
                         save_panel_csv)
from .models import BusEngineModel, EntryExitModel, build_desk_storable
from .operators import ConvergenceError
from .params import read_flat_params
from .solvers import (BreakdownError, SolverConfig, SolverNumericalError,
                      polynomial_interaction_basis, solve_model_adaptive,
                      solve_successive_approximation, solve_temporal_difference)

__all__ = ["ExperimentConfig", "run_bus_demo", "run_entry_exit",
           "run_storable_solve", "run_mcmc_experiment", "main"]

EXPERIMENTS = ("bus-demo", "entry-exit", "storable-solve", "mcmc-run")
TABLE2_BETAS = (0.95, 0.975, 0.98, 0.985, 0.99, 0.995, 0.999)
HUGE_M_THRESHOLD = 9

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_CONVERGENCE = 2


@dataclass
class ExperimentConfig:
    """Parsed experiment settings; ``extras`` holds experiment-specific keys.

    ``betas`` and ``tol`` stay None unless given explicitly so each
    experiment can fill in its own defaults (0.9/1e-8 for the bus demo,
    0.95/1e-7 for entry/exit).
    """

    experiment: str
    out_dir: Path
    seed: int = 0
    betas: Optional[List[float]] = None
    ms: List[int] = field(default_factory=lambda: [5])
    tol: Optional[float] = None
    solver: str = "model_adaptive"
    huge: bool = False
    extras: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; "
                             f"choose from {EXPERIMENTS}")
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        probe = self.out_dir / ".write_probe"
        try:
            probe.write_text("")
            probe.unlink()
        except OSError as err:
            raise ValueError(f"output directory {self.out_dir} is not writable: {err}")

    def extra_int(self, key: str, default: int) -> int:
        return int(self.extras.get(key, default))

    def extra_float(self, key: str, default: float) -> float:
        return float(self.extras.get(key, default))


def _write_csv(path: Path, header: List[str], rows: List[List]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_metadata(cfg: ExperimentConfig, note: str = ""):
    lines = [
        f"timestamp_utc = {datetime.now(timezone.utc).isoformat()}",
        f"experiment = {cfg.experiment}",
        f"seed = {cfg.seed}",
        f"betas = {','.join(str(b) for b in cfg.betas or [])}",
        f"ms = {','.join(str(m) for m in cfg.ms)}",
        f"tol = {cfg.tol}",
        f"solver = {cfg.solver}",
    ]
    if note:
        lines.append(f"note = {note}")
    (cfg.out_dir / "run_metadata.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# bus-demo
# ---------------------------------------------------------------------------

def run_bus_demo(cfg: ExperimentConfig) -> int:
    """Solve the bus DP, run the model-adaptive solver at the true CCPs, and
    write per-iteration value approximations and norm traces."""
    beta = cfg.betas[0] if cfg.betas else 0.9
    model = BusEngineModel(beta=beta)
    v_true = model.solve_dp(tol=1e-10)
    ccp = Ccp(model.true_ccp(v_true), model.grid)
    solver_cfg = SolverConfig(tol=cfg.tol if cfg.tol is not None else 1e-8,
                              tol_norm="sup", record_history=True)
    u, op = assemble_policy_valuation(model, ccp)
    V, report = solve_model_adaptive(op, u, solver_cfg)

    conv_rows = []
    iter_rows = []
    for k, (res_sup, res_l2) in enumerate(report.residual_history, start=1):
        y_k = report.iterates[k - 1]
        v_k = y_k - op.apply_adjoint(y_k)
        err = v_k - v_true
        conv_rows.append([k, _fmt(res_sup), _fmt(res_l2),
                          _fmt(np.max(np.abs(err))), _fmt(np.linalg.norm(err))])
        for idx in range(model.n_states):
            iter_rows.append([k, idx, _fmt(model.mileage[idx]), _fmt(v_k[idx])])
    _write_csv(cfg.out_dir / "bus_convergence.csv",
               ["iter", "res_sup", "res_l2", "err_sup", "err_l2"], conv_rows)
    _write_csv(cfg.out_dir / "bus_iterates.csv",
               ["iter", "state_index", "mileage", "value"], iter_rows)
    _write_csv(cfg.out_dir / "bus_summary.csv",
               ["iterations", "converged", "matvec_count", "final_res_sup"],
               [[report.iterations, int(report.converged), report.matvec_count,
                 _fmt(report.residual_history[-1][0] if report.residual_history else 0.0)]])
    _write_csv(cfg.out_dir / "timings.csv", ["step", "seconds"],
               [["ma_solve", _fmt(report.wall_time)]])
    _write_metadata(cfg)
    print(f"bus-demo: {report.iterations} iterations, converged={report.converged}")
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------
# entry-exit
# ---------------------------------------------------------------------------

def _stationary_from_operator(op, tol: float = 1e-10, max_iter: int = 200_000
                              ) -> np.ndarray:
    mu = np.full(op.n, 1.0 / op.n)
    for _ in range(max_iter):
        nxt = op.apply_adjoint(mu) / op.beta
        gap = float(np.abs(nxt - mu).sum())
        mu = nxt
        if gap <= tol:
            break
    mu = np.maximum(mu, 0.0)
    return mu / mu.sum()


def run_entry_exit(cfg: ExperimentConfig) -> int:
    """Policy-iteration sweep over (m, beta) plus the solver comparison at
    true CCPs on the smallest grid in the sweep."""
    betas = cfg.betas if cfg.betas else [0.95]
    tol = cfg.tol if cfg.tol is not None else 1e-7
    ms = sorted(cfg.ms)
    for m in ms:
        if m >= HUGE_M_THRESHOLD and not cfg.huge:
            states = 2 * m**5
            print(f"m={m} gives {states} states "
                  f"(~{states * 8 * m**5 / 2**30:.1f} GiB dense per block); "
                  "pass --huge to run it", file=sys.stderr)
            return EXIT_USAGE
    table2_rows = []
    timing_rows = []
    all_converged = True
    solver_cfg = SolverConfig(tol=tol, tol_norm="sup")
    for m in ms:
        for beta in betas:
            model = EntryExitModel(m_points=m, beta=beta)
            start = time.perf_counter()
            V, ccp, report = policy_iteration(model, inner=cfg.solver,
                                              inner_cfg=solver_cfg,
                                              outer_tol=1e-5, warm_start=False)
            elapsed = time.perf_counter() - start
            inner = report.inner_iterations
            table2_rows.append([m, f"{beta:g}", report.outer_iterations,
                                _fmt(float(np.mean(inner))),
                                ",".join(str(i) for i in inner)])
            timing_rows.append([f"policy_iteration_m{m}_beta{beta:g}",
                                _fmt(elapsed)])
            all_converged &= report.converged
    _write_csv(cfg.out_dir / "table2_policy_iteration.csv",
               ["m", "beta", "outer_iters", "avg_inner_iters", "inner_iters"],
               table2_rows)

    # solver comparison at true CCPs on the smallest grid
    m_cmp = ms[0]
    table3_rows = []
    for beta in betas:
        model = EntryExitModel(m_points=m_cmp, beta=beta)
        V, ccp, _ = policy_iteration(model, inner="model_adaptive",
                                     inner_cfg=solver_cfg, outer_tol=1e-5)
        u, op = assemble_policy_valuation(model, ccp)
        start = time.perf_counter()
        _, ma_rep = solve_model_adaptive(op, u, SolverConfig(tol=tol, tol_norm="sup"))
        t_ma = time.perf_counter() - start
        start = time.perf_counter()
        _, sa_rep = solve_successive_approximation(
            op, u, SolverConfig(tol=tol, tol_norm="sup", max_iter=500_000))
        t_sa = time.perf_counter() - start
        start = time.perf_counter()
        weights = _stationary_from_operator(op)
        td_residuals = []
        for degree in range(1, 11):
            basis = polynomial_interaction_basis(model.grid.points, degree)
            _, td_rep = solve_temporal_difference(op, u, basis, weights)
            td_residuals.append(td_rep.residual_history[-1][0])
        t_td = time.perf_counter() - start
        all_converged &= ma_rep.converged and sa_rep.converged
        table3_rows.append([f"{beta:g}", "model_adaptive", ma_rep.iterations,
                            _fmt(ma_rep.residual_history[-1][0]), ""])
        table3_rows.append([f"{beta:g}", "successive_approximation", sa_rep.iterations,
                            _fmt(sa_rep.residual_history[-1][0]), ""])
        table3_rows.append([f"{beta:g}", "temporal_difference", len(td_residuals),
                            "", _fmt(min(td_residuals))])
        timing_rows.extend([
            [f"compare_ma_beta{beta:g}", _fmt(t_ma)],
            [f"compare_sa_beta{beta:g}", _fmt(t_sa)],
            [f"compare_td_beta{beta:g}", _fmt(t_td)],
        ])
    _write_csv(cfg.out_dir / "table3_solver_comparison.csv",
               ["beta", "solver", "iterations", "residual_sup", "td_min_residual"],
               table3_rows)
    _write_csv(cfg.out_dir / "timings.csv", ["step", "seconds"], timing_rows)
    _write_metadata(cfg, note=f"comparison grid m={m_cmp}")
    print(f"entry-exit: {len(table2_rows)} policy-iteration cells, "
          f"comparison at m={m_cmp}")
    return EXIT_OK if all_converged else EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------
# storable-solve
# ---------------------------------------------------------------------------

def run_storable_solve(cfg: ExperimentConfig) -> int:
    """Solve the desk-scale storable model with all five algorithms and emit
    outer-iteration counts plus cross-algorithm value gaps."""
    iv_bins = cfg.extra_int("iv_bins", 3)
    model = build_desk_storable(iv_bins=iv_bins)
    inner_cfg = SolverConfig(tol=1e-8, tol_norm="sup")
    rows = []
    timing_rows = []
    solutions = {}
    for name, inner in (("policy_ma", "model_adaptive"),
                        ("policy_sa", "successive_approximation"),
                        ("policy_exact", "exact")):
        start = time.perf_counter()
        solutions[name] = storable_policy_loop(model, inner=inner,
                                               inner_cfg=inner_cfg,
                                               policy_tol=1e-4)
        timing_rows.append([name, _fmt(time.perf_counter() - start)])
    start = time.perf_counter()
    solutions["value_iteration"] = value_iteration_driver(model, value_tol=1e-8)
    timing_rows.append(["value_iteration", _fmt(time.perf_counter() - start)])
    start = time.perf_counter()
    solutions["one_step"] = one_step_value_iteration_driver(model, value_tol=1e-8)
    timing_rows.append(["one_step", _fmt(time.perf_counter() - start)])

    reference = solutions["policy_ma"].V.values
    all_converged = True
    for name, sol in solutions.items():
        gap = float(np.max(np.abs(sol.V.values - reference)))
        rows.append([name, sol.outer_iterations, int(sol.converged), _fmt(gap)])
        all_converged &= sol.converged
    _write_csv(cfg.out_dir / "storable_algorithms.csv",
               ["algorithm", "outer_iters", "converged", "value_gap_vs_policy_ma"],
               rows)
    _write_csv(cfg.out_dir / "timings.csv", ["step", "seconds"], timing_rows)
    _write_metadata(cfg, note=f"iv_bins={iv_bins}, states={model.n_states}")
    print("storable-solve: outer iterations "
          + ", ".join(f"{name}={sol.outer_iterations}" for name, sol in solutions.items()))
    return EXIT_OK if all_converged else EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------
# mcmc-run
# ---------------------------------------------------------------------------

def run_mcmc_experiment(cfg: ExperimentConfig) -> int:
    """Generate a synthetic panel at the model's parameters and check that
    the adaptive chain recovers them."""
    iv_bins = cfg.extra_int("iv_bins", 3)
    n_households = cfg.extra_int("households", 50)
    n_periods = cfg.extra_int("periods", 100)
    total_draws = cfg.extra_int("draws", 500)
    burn_in = cfg.extra_int("burn_in", total_draws // 2)
    model = build_desk_storable(iv_bins=iv_bins)
    truth = np.asarray(model.theta)

    solution = storable_policy_loop(model, inner="model_adaptive",
                                    inner_cfg=SolverConfig(tol=1e-8, tol_norm="sup"))
    panel = forward_simulate(model, solution.V.values, solution.consumption,
                             n_households, n_periods, seed=cfg.seed)
    save_panel_csv(panel, cfg.out_dir / "panel.csv")

    mcmc_cfg = McmcConfig(total_draws=total_draws, burn_in=burn_in, seed=cfg.seed)
    start = time.perf_counter()
    result = run_mcmc(model, panel, mcmc_cfg, initial_theta=truth)
    elapsed = time.perf_counter() - start
    result.write_csv(cfg.out_dir / "chain.csv")

    rows = []
    recovered = True
    for i, name in enumerate(["theta1", "theta2", "theta3", "theta4"]):
        mean = result.posterior_mean[i]
        sd = result.posterior_sd[i]
        z = abs(mean - truth[i]) / sd if sd > 0 else float("inf")
        recovered &= z <= 3.0
        rows.append([name, _fmt(truth[i]), _fmt(mean), _fmt(sd), _fmt(z)])
    _write_csv(cfg.out_dir / "recovery.csv",
               ["param", "truth", "post_mean", "post_sd", "abs_z"], rows)
    _write_csv(cfg.out_dir / "timings.csv", ["step", "seconds"],
               [["mcmc", _fmt(elapsed)]])
    _write_metadata(cfg, note=f"households={n_households}, periods={n_periods}, "
                              f"draws={total_draws}")
    print(f"mcmc-run: acceptance {result.acceptance_rate:.3f}, "
          f"recovered={recovered}")
    return EXIT_OK if recovered else EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

# flat key = value files, shared with the model loaders
parse_flat_config = read_flat_params


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="maddc-bench",
                     description="dynamic discrete choice solver benchmarks")
    parser.add_argument("--experiment", choices=EXPERIMENTS)
    parser.add_argument("--beta", default=None,
                        help="comma-separated discount factors (default 0.95)")
    parser.add_argument("--m", default=None,
                        help="comma-separated grid sizes per dimension (default 5)")
    parser.add_argument("--tol", type=float, default=None,
                        help="solver stopping tolerance (default 1e-7)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--solver", default=None,
                        choices=["model_adaptive", "successive_approximation", "exact"])
    parser.add_argument("--huge", action="store_true",
                        help="allow entry-exit grids with m >= 9")
    parser.add_argument("--config", default=None,
                        help="flat key=value file; values override flags")
    return parser


def build_config(argv=None) -> ExperimentConfig:
    args = _build_parser().parse_args(argv)
    merged: Dict[str, str] = {}
    if args.experiment:
        merged["experiment"] = args.experiment
    for key in ("beta", "m", "tol", "seed", "out", "solver"):
        value = getattr(args, key)
        if value is not None:
            merged[key] = str(value)
    if args.huge:
        merged["huge"] = "true"
    if args.config:
        merged.update(parse_flat_config(args.config))

    if "experiment" not in merged:
        print("error: --experiment is required (or 'experiment' in the config file)",
              file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    known = {"experiment", "beta", "m", "tol", "seed", "out", "solver", "huge"}
    extras = {k: v for k, v in merged.items() if k not in known}
    try:
        return ExperimentConfig(
            experiment=merged["experiment"],
            out_dir=Path(merged.get("out", "results")),
            seed=int(merged.get("seed", 0)),
            betas=([float(b) for b in merged["beta"].split(",")]
                   if "beta" in merged else None),
            ms=[int(m) for m in merged.get("m", "5").split(",")],
            tol=float(merged["tol"]) if "tol" in merged else None,
            solver=merged.get("solver", "model_adaptive"),
            huge=merged.get("huge", "false").lower() in ("1", "true", "yes"),
            extras=extras,
        )
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


_RUNNERS = {
    "bus-demo": run_bus_demo,
    "entry-exit": run_entry_exit,
    "storable-solve": run_storable_solve,
    "mcmc-run": run_mcmc_experiment,
}


def main(argv=None) -> int:
    try:
        cfg = build_config(argv)
    except SystemExit as err:
        return int(err.code) if err.code is not None else EXIT_USAGE
    try:
        return _RUNNERS[cfg.experiment](cfg)
    except (SolverNumericalError, BreakdownError, ConvergenceError,
            RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
