"""Command-line entry point: ``dynamic-deviation <command> --config run.yaml``.

Commands write ``<command>.csv`` and ``<command>.json`` into the output
directory. Exit codes: 0 success, 1 failed check or non-convergence, 2 bad
usage or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from .config import ConfigError, RunConfig, load_config
from .deviation import (
    RepresentingPair,
    c_alpha,
    convergence_table,
    ddrm_limit,
    deviation_integral,
    deviation_profile,
)
from .equilibrium import ConvergenceError, EquilibriumSolution, fixed_point, hjb_table, ode_residuals
from .market import simulate
from .validate import estimate_objective, perturbation_suite


COMMANDS = ("deviation", "policy", "simulate", "validate", "hjb-check", "convergence")
HJB_TOL = 1e-6
# operator closed forms against their atom-sum evaluation, relative to x
CONSISTENCY_TOL = 1e-12

HELP = {
    "deviation": "D_t profile of a representing pair under the configured driver",
    "policy": "Solve the equilibrium fixed point and tabulate a*, C*, b, d, v",
    "simulate": "Simulate terminal wealth under the equilibrium policy",
    "validate": "Monte Carlo objective check and perturbation tests",
    "hjb-check": "Extended HJB residual table",
    "convergence": "Grid CVaR deviation against its mesh limit",
}

console = Console()


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
        force=True,
    )


class Outcome:
    """Artifacts and pass flag of one command."""

    def __init__(self, passed: bool, summary: str, result: Dict[str, Any], table: Optional[pd.DataFrame] = None):
        self.passed = passed
        self.summary = summary
        self.result = result
        self.table = table


def _pair(config: RunConfig) -> RepresentingPair:
    return config.representing_pair()


def _solve(config: RunConfig) -> Tuple[Any, Any, EquilibriumSolution]:
    config.require("market", "problem")
    model = config.market_model()
    driver = config.build_driver(model.measure)
    numerics = config.numerics
    solution = fixed_point(
        model, driver, config.problem.gamma, config.problem.T,
        grid_size=numerics.grid_size, tol=numerics.tol, max_iter=numerics.max_iter,
        damping=numerics.damping, workers=numerics.workers,
    )
    return model, driver, solution


def cmd_deviation(config: RunConfig) -> Outcome:
    pair = _pair(config)
    driver = config.build_driver(pair.measure)
    times = config.pair.times or pair.grid.tolist()
    profile = deviation_profile(driver, pair, times)
    value = deviation_integral(driver, pair)
    alpha = config.pair.alpha
    result = {
        "deviation": value,
        "driver": driver.describe(),
        "alpha": alpha,
        "c_alpha": c_alpha(alpha),
        "ddrm_limit": ddrm_limit(pair, alpha),
    }
    return Outcome(True, f"D_0 = {value:.10g}", result, pd.DataFrame({"t": times, "deviation": profile}))


def cmd_convergence(config: RunConfig) -> Outcome:
    pair = _pair(config)
    block = config.pair
    rows = convergence_table(pair, block.alpha, block.levels, block.samples_per_cell,
                             config.numerics.seed, config.numerics.workers)
    table = pd.DataFrame([row.__dict__ for row in rows])
    result = {"alpha": block.alpha, "limit": rows[0].limit if rows else None, "rows": table.to_dict("records")}
    last = rows[-1] if rows else None
    summary = f"level {last.level}: {last.value:.8g} vs limit {last.limit:.8g}" if last else "no levels"
    return Outcome(True, summary, result, table)


def cmd_policy(config: RunConfig) -> Outcome:
    _, _, solution = _solve(config)
    t_star = solution.summary()["t_star"]
    summary = f"a_- = {solution.a_minus:.8g}, t* = {t_star}, {solution.iterations} iterations"
    return Outcome(True, summary, solution.summary(), solution.to_frame())


def cmd_simulate(config: RunConfig) -> Outcome:
    model, _, solution = _solve(config)
    numerics = config.numerics
    paths = simulate(model, solution.policy(), config.problem.x0, numerics.n_paths, numerics.seed,
                     workers=numerics.workers)
    stats = paths.summary()
    table = pd.DataFrame({"path": np.arange(paths.n_paths), "terminal_wealth": paths.terminal})
    return Outcome(True, f"mean X_T = {stats['mean']:.8g} (se {stats['se']:.2g})", stats, table)


def _perturbation_plan(config: RunConfig, solution: EquilibriumSolution, n: int):
    T = solution.T
    h = config.checks.h_step or T / 64.0
    start = solution.t_star if math.isfinite(solution.t_star) and solution.t_star < T else 0.0
    start = max(start, 0.0)
    times = config.checks.perturbation_times or [start + 0.5 * h, 0.5 * (start + T), T - h]
    heads = config.checks.perturbation_heads or [[0.0] * n, [0.5] + [0.0] * (n - 1)]
    return times, heads, h


def cmd_validate(config: RunConfig) -> Outcome:
    model, driver, solution = _solve(config)
    numerics = config.numerics
    gamma, x0 = config.problem.gamma, config.problem.x0
    report = estimate_objective(model, driver, gamma, solution.policy(), x0, numerics.n_paths, numerics.seed,
                                workers=numerics.workers)
    times, heads, h = _perturbation_plan(config, solution, model.n)
    suite = perturbation_suite(model, driver, gamma, solution, times, heads, h, numerics.n_paths,
                               numerics.seed, x=x0, workers=numerics.workers)
    console.print(f"runtime of the objective estimate: {report.runtime:.2f}s")
    result = {"objective": report.to_dict(), "perturbation": suite.to_dict(), "solution": solution.summary()}
    table = pd.DataFrame([r.to_dict() for r in suite.reports])
    summary = f"J = {report.objective:.8g} (se {report.objective_se:.2g}) vs V = {report.target_value:.8g}"
    return Outcome(report.passed and suite.passed, summary, result, table)


def cmd_hjb_check(config: RunConfig) -> Outcome:
    model, driver, solution = _solve(config)
    gamma = config.problem.gamma
    table = hjb_table(model, driver, gamma, solution, config.checks.hjb_x)
    kept = table[~table["excluded"]]
    scaled = np.maximum(kept["res_V"].abs(), kept["res_h"].abs()) / kept["x"]
    worst = float(scaled.max()) if len(kept) else 0.0
    gap = float((table["consistency"] / table["x"]).max()) if len(table) else 0.0
    odes = ode_residuals(solution, model, driver)
    result = {
        "max_scaled_residual": worst,
        "max_ode_residual": odes.max_abs(),
        "excluded_points": int(table["excluded"].sum()),
        "max_consistency_gap": gap,
        "tolerance": HJB_TOL,
        "solution": solution.summary(),
    }
    passed = worst <= HJB_TOL and gap <= CONSISTENCY_TOL
    return Outcome(passed, f"max |res|/x = {worst:.3e}", result, table)


HANDLERS: Dict[str, Callable[[RunConfig], Outcome]] = {
    "deviation": cmd_deviation,
    "policy": cmd_policy,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "hjb-check": cmd_hjb_check,
    "convergence": cmd_convergence,
}


def write_artifacts(command: str, config: RunConfig, outcome: Outcome, out_dir: Path) -> List[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = command.replace("-", "_")
    written = []
    if outcome.table is not None and "csv" in config.output.formats:
        path = out_dir / f"{stem}.csv"
        outcome.table.to_csv(path, index=False, float_format="%.17g")
        written.append(path)
    if "json" in config.output.formats:
        payload = {
            "command": command,
            "config": config.to_dict(),
            "seed": config.numerics.seed,
            "passed": outcome.passed,
            "result": outcome.result,
        }
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
        written.append(path)
    return written


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _print_summary(command: str, outcome: Outcome, written: Sequence[Path]) -> None:
    status = "✅" if outcome.passed else "❌"
    console.print(f"{status} {command}: {outcome.summary}")
    table = Table(show_header=True, header_style="bold")
    table.add_column("artifact")
    for path in written:
        table.add_row(str(path))
    if written:
        console.print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynamic-deviation", description="Dynamic deviation measures and equilibrium portfolios")
    subparsers = parser.add_subparsers(dest="command", required=True, help="Available commands")
    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=HELP[command])
        sub.add_argument("--config", "-c", help="YAML run configuration")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                         help="Override a config value (repeatable)")
        sub.add_argument("--out", "-o", help="Output directory (default: output.directory)")
        sub.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(args.verbose)
    try:
        config = load_config(args.config, args.overrides)
        outcome = HANDLERS[args.command](config)
    except ConvergenceError as exc:
        console.print(f"❌ {args.command}: {exc} (iterations={exc.iterations}, residual={exc.residual:.3e})")
        return 1
    except ConfigError as exc:
        console.print(f"❌ config error: {exc}")
        return 2
    except ValueError as exc:
        console.print(f"❌ invalid input: {exc}")
        return 2

    out_dir = Path(args.out or config.output.directory)
    written = write_artifacts(args.command, config, outcome, out_dir)
    _print_summary(args.command, outcome, written)
    return 0 if outcome.passed else 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
