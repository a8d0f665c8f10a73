"""Jump-diffusion market, deterministic allocation policies and exact wealth simulation.

Wealth under an allocation c in B = {c >= 0, sum(c) <= 1} solves

    dX = X [ mu_c dt + c^T Sigma dW + c^T R dL~ ],    mu_c = r + (mu - r 1)^T c,

with L~ the compensated compound Poisson process of the Levy measure. The
SDE is linear, so inside a cell with constant c it is stepped exactly in log
space and wealth stays positive by construction.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .deviation import RepresentingPair
from .jumps import LevyMeasure, mean_vector, sample_counts
from .streams import PATH_BLOCK, path_blocks, stream

logger = logging.getLogger(__name__)

ADMISSIBILITY_TOL = 1e-12


class InadmissiblePolicyError(ValueError):
    """An allocation lies outside B = {c >= 0, sum(c) <= 1}."""


@dataclass(frozen=True, eq=False)
class MarketModel:
    r: float
    mu: np.ndarray
    sigma: np.ndarray
    R: np.ndarray
    measure: LevyMeasure

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        n = mu.shape[0]
        sigma = np.asarray(self.sigma, dtype=float).reshape(n, -1)
        R = np.asarray(self.R, dtype=float).reshape(n, -1)
        d, k = sigma.shape[1], R.shape[1]
        if self.r < 0.0:
            raise ValueError(f"interest rate must be >= 0, got {self.r}")
        if np.any(sigma < 0.0):
            raise ValueError("volatilities must be nonnegative")
        if np.any(R < 0.0) or np.any(R.sum(axis=1) > 1.0 + ADMISSIBILITY_TOL):
            raise ValueError(f"jump sensitivities must be >= 0 with row sums <= 1, got {R.tolist()}")
        if not 1 <= n <= min(d, k):
            raise ValueError(f"need 1 <= n <= min(d, k), got n={n}, d={d}, k={k}")
        if self.measure.dimension != k:
            raise ValueError(f"Levy measure has dimension {self.measure.dimension}, R has {k} columns")
        if np.any(mu < self.r):
            raise ValueError(f"appreciation rates must be >= r={self.r}, got {mu.tolist()}")
        for name, array in (("mu", mu), ("sigma", sigma), ("R", R)):
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        object.__setattr__(self, "r", float(self.r))

    @classmethod
    def from_config(cls, block: Any) -> "MarketModel":
        """Build from an object with ``r``, ``mu``, ``sigma``, ``R`` and ``atoms`` attributes."""
        R = np.atleast_2d(np.asarray(block.R, dtype=float))
        measure = LevyMeasure.from_rows(block.atoms, dimension=R.shape[1])
        return cls(block.r, np.asarray(block.mu, dtype=float), np.atleast_2d(block.sigma), R, measure)

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def excess(self) -> np.ndarray:
        return self.mu - self.r

    def mu_pi(self, c: np.ndarray) -> float:
        return self.r + float(self.excess @ c)

    def sigma_pi(self, c: np.ndarray) -> np.ndarray:
        """Diffusion coefficient c^T Sigma (length d)."""
        return np.asarray(c, dtype=float) @ self.sigma

    def jump_direction(self, c: np.ndarray) -> np.ndarray:
        """R^T c, so that the jump payoff is y -> (R^T c)^T y."""
        return np.asarray(c, dtype=float) @ self.R

    def jump_payoff(self, c: np.ndarray) -> np.ndarray:
        """c^T R y_j on every atom."""
        return self.measure.locations @ self.jump_direction(c)


def _as_allocation(values: np.ndarray, n: int) -> np.ndarray:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] != n:
        raise ValueError(f"allocations must have {n} components, got shape {values.shape}")
    bad = (values.min(axis=1) < -ADMISSIBILITY_TOL) | (values.sum(axis=1) > 1.0 + ADMISSIBILITY_TOL)
    if np.any(bad):
        cells = np.flatnonzero(bad).tolist()
        raise InadmissiblePolicyError(f"allocation outside B in cells {cells}: {values[bad].tolist()}")
    return np.clip(values, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Policy:
    """Piecewise-constant allocation: ``values[i]`` is played on [grid[i], grid[i+1])."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0.0):
            raise ValueError("policy grid must be strictly increasing with at least two points")
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] != grid.size - 1:
            raise ValueError(f"policy has {grid.size - 1} cells but {values.shape[0]} allocations")
        values = _as_allocation(values, values.shape[1])
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, c: Sequence[float], T: float, start: float = 0.0) -> "Policy":
        return cls(np.array([start, T]), np.atleast_2d(c))

    @property
    def start(self) -> float:
        return float(self.grid[0])

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def breakpoints(self) -> np.ndarray:
        return self.grid

    def value_at(self, t: float) -> np.ndarray:
        i = int(np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, self.grid.size - 2))
        return self.values[i]

    def on_grid(self, grid: np.ndarray) -> np.ndarray:
        """Allocation of every cell of ``grid`` (which must refine the policy grid)."""
        index = np.searchsorted(self.grid, np.asarray(grid)[:-1], side="right") - 1
        return self.values[np.clip(index, 0, self.grid.size - 2)]

    def coalesced(self) -> "Policy":
        """Merge adjacent cells with equal allocations."""
        keep = np.ones(self.values.shape[0], dtype=bool)
        keep[1:] = np.any(self.values[1:] != self.values[:-1], axis=1)
        grid = np.append(self.grid[:-1][keep], self.grid[-1])
        return Policy(grid, self.values[keep])

    def restricted(self, t: float) -> "Policy":
        """The policy on [t, T]."""
        if not self.start <= t < self.T:
            raise ValueError(f"t must lie in [{self.start}, {self.T}), got {t}")
        grid = np.concatenate([[t], self.grid[self.grid > t]])
        return Policy(grid, self.on_grid(grid))

    def with_head(self, head: Sequence[float], t: float, h: float) -> "Policy":
        """Play ``head`` on [t, t + h) and this policy elsewhere."""
        if h <= 0.0 or t + h > self.T + ADMISSIBILITY_TOL:
            raise ValueError(f"need 0 < h and t + h <= T, got t={t}, h={h}")
        end = min(t + h, self.T)
        grid = np.union1d(self.grid, [t, end])
        values = np.array(self.on_grid(grid))
        values[(grid[:-1] >= t) & (grid[:-1] < end)] = np.asarray(head, dtype=float)
        return Policy(grid, values)


@dataclass(frozen=True, eq=False)
class PathSet:
    """Simulated wealth, one row per path, one column per grid point.

    ``jumps`` holds per-path (times, atom indices) logs. ``occupation[p, i]``
    is the mean of int X_{s-} b_pi(s) ds over cell i given the cell's
    Brownian increment and its jump times (wealth between the grid points
    is a geometric Brownian bridge).
    """

    grid: np.ndarray
    wealth: np.ndarray
    seed: int
    jumps: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None
    occupation: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.wealth.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.wealth[:, -1]

    def summary(self) -> Dict[str, float]:
        terminal = self.terminal
        se = float(terminal.std(ddof=1) / math.sqrt(terminal.size)) if terminal.size > 1 else 0.0
        q05, q50, q95 = np.quantile(terminal, [0.05, 0.5, 0.95])
        return {
            "n_paths": int(terminal.size),
            "mean": float(terminal.mean()),
            "se": se,
            "min": float(self.wealth.min()),
            "q05": float(q05),
            "median": float(q50),
            "q95": float(q95),
        }


def _check_simulation_grid(policy: Policy, grid: Optional[np.ndarray]) -> np.ndarray:
    if grid is None:
        return np.array(policy.grid)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0.0):
        raise ValueError("simulation grid must be strictly increasing with at least two points")
    if not (math.isclose(grid[0], policy.start, abs_tol=1e-12) and math.isclose(grid[-1], policy.T, abs_tol=1e-12)):
        raise ValueError(f"simulation grid must span [{policy.start}, {policy.T}]")
    missing = [b for b in policy.grid if not np.any(np.abs(grid - b) <= 1e-12)]
    if missing:
        raise ValueError(f"simulation grid misses policy breakpoints {missing[:5]}")
    return grid


# Gauss-Legendre rule for the smooth in-cell integrands exp(p u - q u^2)
_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _integrate_tail(start: np.ndarray, end: float, p: np.ndarray, q: float) -> np.ndarray:
    """int_start^end exp(p u - q u^2) du, elementwise."""
    half = 0.5 * (end - start)
    u = (start + half)[:, None] + half[:, None] * _GAUSS_NODES
    return half * (np.exp(p[:, None] * u - q * u * u) @ _GAUSS_WEIGHTS)


def _cell_occupation(
    dt: float,
    diffusion: np.ndarray,
    variance: float,
    compensator: float,
    path_index: Optional[np.ndarray],
    offsets: Optional[np.ndarray],
    jump_logs: Optional[np.ndarray],
) -> np.ndarray:
    """E[int_cell X_s b(s) ds | cell data] / (X b at the cell start), per path.

    Given the Brownian increment of the cell, exp of the diffusion part is a
    geometric Brownian bridge, and X b changes between jumps by
    exp(p u - q u^2) with p = increment / dt - c^T R m and q = |c^T Sigma|^2 / (2 dt).
    Each jump at offset tau multiplies the integrand on [tau, dt] by its factor.
    """
    p = diffusion / dt - compensator
    q = 0.5 * variance / dt
    total = _integrate_tail(np.zeros(diffusion.size), dt, p, q)
    if path_index is None or path_index.size == 0:
        return total
    order = np.lexsort((offsets, path_index))
    path_index, offsets, jump_logs = path_index[order], offsets[order], jump_logs[order]
    cumulative = np.cumsum(jump_logs)
    first = np.r_[True, path_index[1:] != path_index[:-1]]
    group_start = np.maximum.accumulate(np.where(first, np.arange(path_index.size), 0))
    before_group = cumulative[group_start] - jump_logs[group_start]
    after = np.exp(cumulative - before_group)
    before = np.exp(cumulative - before_group - jump_logs)
    tail = _integrate_tail(offsets, dt, p[path_index], q)
    return total + np.bincount(path_index, weights=(after - before) * tail, minlength=diffusion.size)


def _simulate_block(
    model: MarketModel,
    allocations: np.ndarray,
    grid: np.ndarray,
    x0: float,
    size: int,
    seed: int,
    block: int,
    record_jumps: bool,
    b_nodes: Optional[np.ndarray],
):
    drift_comp = mean_vector(model.measure)
    log_wealth = np.empty((size, grid.size))
    log_wealth[:, 0] = math.log(x0)
    occupation = np.empty((size, grid.size - 1)) if b_nodes is not None else None
    times: List[List[np.ndarray]] = [[] for _ in range(size)] if record_jumps else []
    atoms: List[List[np.ndarray]] = [[] for _ in range(size)] if record_jumps else []

    for i, c in enumerate(allocations):
        rng = stream(seed, block, i)
        dt = float(grid[i + 1] - grid[i])
        vol = model.sigma_pi(c)
        direction = model.jump_direction(c)
        compensator = float(direction @ drift_comp)
        drift = model.mu_pi(c) - compensator - 0.5 * float(vol @ vol)
        z = rng.standard_normal((size, vol.shape[0]))
        diffusion = math.sqrt(dt) * (z @ vol)
        step = drift * dt + diffusion
        path_index = offsets = jump_logs = None
        if len(model.measure):
            counts = sample_counts(model.measure, dt, size, rng)
            log_factors = np.log1p(model.measure.locations @ direction)
            step += counts @ log_factors
            if (record_jumps or occupation is not None) and counts.any():
                # one uniform offset per jump, in (path, atom) order
                path_index, atom_index = np.divmod(np.repeat(np.arange(counts.size), counts.ravel()), counts.shape[1])
                offsets = dt * rng.uniform(size=path_index.size)
                jump_logs = log_factors[atom_index]
                if record_jumps:
                    bounds = np.cumsum(counts.sum(axis=1))[:-1]
                    split_times = np.split(grid[i] + offsets, bounds)
                    split_atoms = np.split(atom_index, bounds)
                    for p in np.flatnonzero(counts.sum(axis=1)):
                        times[p].append(split_times[p])
                        atoms[p].append(split_atoms[p])
        if occupation is not None:
            occupation[:, i] = np.exp(log_wealth[:, i]) * b_nodes[i] * _cell_occupation(
                dt, diffusion, float(vol @ vol), compensator, path_index, offsets, jump_logs
            )
        log_wealth[:, i + 1] = log_wealth[:, i] + step

    logs = None
    if record_jumps:
        logs = []
        for p in range(size):
            if times[p]:
                t = np.concatenate(times[p])
                a = np.concatenate(atoms[p])
                order = np.argsort(t, kind="stable")
                logs.append((t[order], a[order]))
            else:
                logs.append((np.zeros(0), np.zeros(0, dtype=np.int64)))
    return np.exp(log_wealth), logs, occupation


def simulate(
    model: MarketModel,
    policy: Policy,
    x0: float,
    n_paths: int,
    seed: int,
    grid: Optional[np.ndarray] = None,
    record_jumps: bool = False,
    workers: int = 1,
    occupation: bool = False,
) -> PathSet:
    """Exact log-space simulation of wealth under a deterministic policy.

    Draws are keyed by (seed, block of PATH_BLOCK paths, cell), so the output
    does not depend on ``workers``. With ``occupation`` the PathSet also holds
    the per-cell integrals of X b_pi (see ``PathSet.occupation``).
    """
    if x0 <= 0.0:
        raise ValueError(f"initial wealth must be positive, got {x0}")
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if policy.n != model.n:
        raise InadmissiblePolicyError(f"policy allocates {policy.n} assets, market has {model.n}")
    grid = _check_simulation_grid(policy, grid)
    allocations = _as_allocation(policy.on_grid(grid), model.n)
    b_nodes = growth_factors(model, policy, grid) if occupation else None

    blocks = list(path_blocks(n_paths, PATH_BLOCK))

    def run(item):
        index, rows = item
        return _simulate_block(
            model, allocations, grid, x0, rows.stop - rows.start, seed, index, record_jumps, b_nodes
        )

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(item) for item in blocks]

    wealth = np.vstack([r[0] for r in results])
    jumps = [log for r in results for log in r[1]] if record_jumps else None
    integrals = np.vstack([r[2] for r in results]) if occupation else None
    if not np.all(wealth > 0.0):
        raise ArithmeticError("simulated wealth left (0, inf)")
    logger.debug(":: simulated %d paths on %d cells (seed %d)", n_paths, grid.size - 1, seed)
    return PathSet(grid=grid, wealth=wealth, seed=seed, jumps=jumps, occupation=integrals)


def growth_factor(model: MarketModel, policy: Policy, t: float) -> float:
    """b_pi(t) = exp(int_t^T mu_pi(s) ds)."""
    if not policy.start <= t <= policy.T:
        raise ValueError(f"t must lie in [{policy.start}, {policy.T}], got {t}")
    overlap = np.clip(policy.grid[1:] - np.maximum(policy.grid[:-1], t), 0.0, None)
    rates = model.r + policy.values @ model.excess
    return math.exp(float(rates @ overlap))


def growth_factors(model: MarketModel, policy: Policy, grid: np.ndarray) -> np.ndarray:
    """b_pi at every point of ``grid`` (which must refine the policy grid)."""
    grid = np.asarray(grid, dtype=float)
    rates = model.r + policy.on_grid(grid) @ model.excess
    exponent = np.concatenate([np.cumsum((rates * np.diff(grid))[::-1])[::-1], [0.0]])
    return np.exp(exponent)


def wealth_mean(model: MarketModel, policy: Policy, x0: float, t: float) -> float:
    """E[X_T | X_t = x0] for a deterministic policy."""
    return x0 * growth_factor(model, policy, t)


def representing_pair_of_wealth(
    model: MarketModel,
    policy: Policy,
    path: np.ndarray,
    grid: Optional[np.ndarray] = None,
) -> RepresentingPair:
    """Coefficients b(s) X_{s-} pi^T Sigma and b(s) X_{s-} pi^T R y_j along one path.

    ``path`` holds the wealth at the points of ``grid`` (the policy grid by
    default); each cell uses the wealth and b at its left end.
    """
    grid = np.asarray(policy.grid if grid is None else grid, dtype=float)
    path = np.asarray(path, dtype=float)
    if path.shape != grid.shape:
        raise ValueError(f"path has {path.size} values for {grid.size} grid points")
    allocations = policy.on_grid(grid)
    scale = (growth_factors(model, policy, grid) * path)[:-1, None]
    f = scale * (allocations @ model.sigma)
    g = scale * ((allocations @ model.R) @ model.measure.locations.T)
    return RepresentingPair(grid, f, g, model.measure)
