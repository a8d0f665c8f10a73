"""Monte Carlo checks that the constructed value function is the mean-deviation objective.

For a deterministic policy the mean function is h(s, x) = x b_pi(s), and the
representing pair of X_T has coefficients b(s) X_{s-} pi(s)^T Sigma and
b(s) X_{s-} pi(s)^T R y_j. The driver is positively homogeneous, so the
deviation of X_T is the mean of int g^(pi(s)) X_{s-} b_pi(s) ds, whose cell
integrals the simulation provides exactly (``PathSet.occupation``).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .drivers import Driver
from .equilibrium import EquilibriumSolution
from .market import (
    MarketModel,
    PathSet,
    Policy,
    growth_factor,
    growth_factors,
    representing_pair_of_wealth,
    simulate,
)

logger = logging.getLogger(__name__)

Z_LIMIT = 3.0
EXACT_TOL = 1e-9


def cell_penalties(model: MarketModel, driver: Driver, policy: Policy, grid: np.ndarray) -> np.ndarray:
    """g^(pi) on every cell of ``grid``, read off the representing pair of the path X = 1 / b_pi."""
    grid = np.asarray(grid, dtype=float)
    unit = 1.0 / growth_factors(model, policy, grid)
    pair = representing_pair_of_wealth(model, policy, unit, grid)
    return np.array([driver.eval(f, g) for f, g in zip(pair.f, pair.g)])


def pathwise_deviation(model: MarketModel, driver: Driver, policy: Policy, paths: PathSet) -> np.ndarray:
    """Per-path int g^(pi(s)) X_{s-} b_pi(s) ds from the cell integrals of the simulation."""
    if paths.occupation is None:
        raise ValueError("pathwise deviation needs paths simulated with occupation=True")
    return paths.occupation @ cell_penalties(model, driver, policy, paths.grid)


def deviation_target(model: MarketModel, driver: Driver, policy: Policy, t: Optional[float] = None) -> float:
    """d_pi(t) = b_pi(t) int_t^T g^(pi(s)) ds, cell-exact."""
    t = policy.start if t is None else t
    overlap = np.clip(policy.grid[1:] - np.maximum(policy.grid[:-1], t), 0.0, None)
    return growth_factor(model, policy, t) * float(cell_penalties(model, driver, policy, policy.grid) @ overlap)


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def _z_score(estimate: float, target: float, se: float) -> tuple[float, bool]:
    if se == 0.0:
        return 0.0, abs(estimate - target) <= EXACT_TOL * max(1.0, abs(target))
    z = (estimate - target) / se
    return z, abs(z) <= Z_LIMIT


@dataclass
class ValidationReport:
    mean: float
    mean_se: float
    deviation: float
    deviation_se: float
    objective: float
    objective_se: float
    target_mean: float
    target_deviation: float
    target_value: float
    z_mean: float
    z_deviation: float
    z_objective: float
    pass_mean: bool
    pass_deviation: bool
    pass_objective: bool
    n_paths: int
    seed: int
    runtime: float = field(default=0.0, compare=False)

    @property
    def passed(self) -> bool:
        return self.pass_mean and self.pass_deviation and self.pass_objective

    def to_dict(self) -> Dict[str, Any]:
        """Report without the runtime, so artifacts are reproducible."""
        data = asdict(self)
        data.pop("runtime")
        data["passed"] = self.passed
        return data


def estimate_objective(
    model: MarketModel,
    driver: Driver,
    gamma: float,
    policy: Policy,
    x0: float,
    n_paths: int,
    seed: int,
    workers: int = 1,
) -> ValidationReport:
    """Estimate E[X_T], D_0(X_T) and J = E[X_T] - gamma D_0(X_T) and compare with x0 b(0), x0 d(0), V(0, x0)."""
    if not isinstance(policy, Policy):
        raise ValueError("estimate_objective needs a deterministic piecewise-constant Policy")
    if not driver.positively_homogeneous:
        raise ValueError("the pathwise deviation reduction needs a positively homogeneous driver")
    started = time.perf_counter()

    paths = simulate(model, policy, x0, n_paths, seed, workers=workers, occupation=True)
    terminal = paths.terminal
    deviation = pathwise_deviation(model, driver, policy, paths)

    mean, mean_se = _mean_se(terminal)
    dev, dev_se = _mean_se(deviation)
    _, objective_se = _mean_se(terminal - gamma * deviation)
    objective = mean - gamma * dev

    b0 = growth_factor(model, policy, policy.start)
    d0 = deviation_target(model, driver, policy)
    targets = (x0 * b0, x0 * d0, x0 * (b0 - gamma * d0))
    z_mean, pass_mean = _z_score(mean, targets[0], mean_se)
    z_dev, pass_dev = _z_score(dev, targets[1], dev_se)
    z_obj, pass_obj = _z_score(objective, targets[2], objective_se)

    report = ValidationReport(
        mean=mean, mean_se=mean_se,
        deviation=dev, deviation_se=dev_se,
        objective=objective, objective_se=objective_se,
        target_mean=targets[0], target_deviation=targets[1], target_value=targets[2],
        z_mean=z_mean, z_deviation=z_dev, z_objective=z_obj,
        pass_mean=pass_mean, pass_deviation=pass_dev, pass_objective=pass_obj,
        n_paths=n_paths, seed=seed,
        runtime=time.perf_counter() - started,
    )
    logger.info(":: objective %.6g (se %.2g) vs V %.6g, z=%.2f", objective, objective_se, targets[2], z_obj)
    return report


@dataclass
class PerturbationReport:
    t: float
    h_step: float
    head: List[float]
    difference: float
    se: float
    ratio: float
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _pathwise_objective(model, driver, gamma, policy, grid, x, n_paths, seed, workers) -> np.ndarray:
    paths = simulate(model, policy, x, n_paths, seed, grid=grid, workers=workers, occupation=True)
    return paths.terminal - gamma * pathwise_deviation(model, driver, policy, paths)


def perturbation_test(
    model: MarketModel,
    driver: Driver,
    gamma: float,
    solution: EquilibriumSolution,
    t: float,
    h_step: float,
    alt_policy_head: Sequence[float],
    n_paths: int,
    seed: int,
    x: float = 1.0,
    workers: int = 1,
) -> PerturbationReport:
    """J_t(pi*) - J_t(pi_h) from state (t, x) with common random numbers.

    pi_h plays ``alt_policy_head`` on [t, t + h_step) and C* afterwards. A
    pass (difference >= -3 SE) is a necessary condition at finite h only.
    """
    if t + h_step > solution.T + 1e-12:
        raise ValueError(f"t + h_step must not exceed T={solution.T}, got {t} + {h_step}")
    equilibrium = solution.policy().restricted(t)
    perturbed = equilibrium.with_head(alt_policy_head, t, h_step)
    grid = np.union1d(equilibrium.grid, perturbed.grid)

    base = _pathwise_objective(model, driver, gamma, equilibrium, grid, x, n_paths, seed, workers)
    alt = _pathwise_objective(model, driver, gamma, perturbed, grid, x, n_paths, seed, workers)
    difference, se = _mean_se(base - alt)
    passed = difference >= -Z_LIMIT * se
    logger.debug(":: perturbation at t=%.4g head=%s: %.3g (se %.2g)", t, list(alt_policy_head), difference, se)
    return PerturbationReport(
        t=float(t),
        h_step=float(h_step),
        head=[float(v) for v in alt_policy_head],
        difference=difference,
        se=se,
        ratio=difference / h_step,
        passed=bool(passed),
    )


@dataclass
class PerturbationSuite:
    reports: List[PerturbationReport]

    @property
    def passed(self) -> bool:
        return all(report.passed for report in self.reports)

    def to_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "tests": [report.to_dict() for report in self.reports]}


def perturbation_suite(
    model: MarketModel,
    driver: Driver,
    gamma: float,
    solution: EquilibriumSolution,
    times: Sequence[float],
    heads: Sequence[Sequence[float]],
    h_step: float,
    n_paths: int,
    seed: int,
    x: float = 1.0,
    workers: int = 1,
) -> PerturbationSuite:
    reports = [
        perturbation_test(model, driver, gamma, solution, t, h_step, head, n_paths, seed, x, workers)
        for t in times
        for head in heads
    ]
    suite = PerturbationSuite(reports)
    failed = [r for r in reports if not r.passed]
    if failed:
        logger.warning(":: %d of %d perturbation tests failed", len(failed), len(reports))
    return suite
