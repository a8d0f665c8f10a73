"""Equilibrium policies for the dynamic mean-deviation portfolio problem.

The objective of an allocation c in B at level a is

    T_a(c) = a (mu - r 1)^T c - g^(c^T Sigma, c^T R I),

s(a) is its maximum over the boundary of B, and a_- the largest a in
[0, 1/gamma] with s(a) <= 0. The equilibrium level a* solves the fixed point
a*(t) = 1/gamma - int_t^T g^(C(a*(s))) ds, where C(a) = 0 for a <= a_- and
the boundary maximiser otherwise. Wealth enters linearly: V(t, x) = x v(t) and
h(t, x) = x b(t).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator
from scipy.optimize import bisect, minimize_scalar

from .drivers import Driver
from .market import ADMISSIBILITY_TOL, InadmissiblePolicyError, MarketModel, Policy

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12
SEARCH_XATOL = 1e-10
# interior optima this close to a vertex are reported as the vertex
SNAP_TOL = 1e-9
# levels of the face-maximiser table used by the fixed point (two assets)
FACE_LEVELS = 2049


class UnsupportedDimensionError(ValueError):
    """Boundary maximisation is only implemented for one and two risky assets."""


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float, message: str = ""):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            message or f"fixed point did not converge after {iterations} iterations (residual {residual:.3e})"
        )


def driver_on_allocation(driver: Driver, model: MarketModel, c: np.ndarray) -> float:
    """g^(c^T Sigma, c^T R I) with the jump payoff evaluated on the atoms."""
    return driver.eval(model.sigma_pi(c), model.jump_payoff(c))


def objective_T(model: MarketModel, driver: Driver, a: float, c: Sequence[float]) -> float:
    c = np.asarray(c, dtype=float)
    if c.shape != (model.n,):
        raise ValueError(f"allocation must have {model.n} components, got shape {c.shape}")
    if c.min() < -ADMISSIBILITY_TOL or c.sum() > 1.0 + ADMISSIBILITY_TOL:
        raise InadmissiblePolicyError(f"allocation {c.tolist()} is outside B")
    return a * float(model.excess @ c) - driver_on_allocation(driver, model, c)


@dataclass(frozen=True)
class BoundaryMax:
    c: np.ndarray
    s: float

    def __iter__(self):
        return iter((self.c, self.s))


def _best(candidates: List[Tuple[np.ndarray, float]]) -> BoundaryMax:
    top = max(value for _, value in candidates)
    tied = [(c, v) for c, v in candidates if v >= top - TIE_TOL * max(1.0, abs(top))]
    for c, v in tied:
        if not np.any(c):
            return BoundaryMax(c, v)
    c, v = min(tied, key=lambda item: tuple(item[0]))
    return BoundaryMax(c, v)


def _search_hypotenuse(model: MarketModel, driver: Driver, a: float) -> Tuple[np.ndarray, float]:
    """Maximise the concave restriction c -> T_a((c, 1 - c)) on [0, 1]."""
    result = minimize_scalar(
        lambda x: -objective_T(model, driver, a, np.array([x, 1.0 - x])),
        bounds=(0.0, 1.0),
        method="bounded",
        options={"xatol": SEARCH_XATOL},
    )
    x = float(result.x)
    if x < SNAP_TOL:
        x = 0.0
    elif x > 1.0 - SNAP_TOL:
        x = 1.0
    c = np.array([x, 1.0 - x])
    return c, objective_T(model, driver, a, c)


def _vertices(n: int) -> List[np.ndarray]:
    return [np.zeros(n)] + [np.eye(n)[i] for i in range(n)]


def maximize_boundary(model: MarketModel, driver: Driver, a: float) -> BoundaryMax:
    """s(a) and its maximiser over the boundary of B (ties prefer 0, then the smallest c)."""
    if model.n > 2:
        raise UnsupportedDimensionError(f"boundary maximisation supports n <= 2, got n={model.n}")
    candidates = [(c, objective_T(model, driver, a, c)) for c in _vertices(model.n)]
    if model.n == 2:
        # T_a is positively homogeneous, so along the coordinate edges it is
        # linear and the vertices already cover them
        candidates.append(_search_hypotenuse(model, driver, a))
    return _best(candidates)


def _outer_face_max(model: MarketModel, driver: Driver, a: float) -> float:
    """max of T_a over {c in B : sum(c) = 1}; s(a) <= 0 iff this is <= 0."""
    if model.n > 2:
        raise UnsupportedDimensionError(f"boundary maximisation supports n <= 2, got n={model.n}")
    values = [objective_T(model, driver, a, c) for c in _vertices(model.n)[1:]]
    if model.n == 2:
        values.append(_search_hypotenuse(model, driver, a)[1])
    return max(values)


def a_minus(model: MarketModel, driver: Driver, gamma: float) -> float:
    """Largest a in [0, 1/gamma] with s(a) <= 0, by bisection.

    Returns 1/gamma when s(1/gamma) <= 0 and -inf when s(0) > 0 (possible
    only for drivers that take negative values).
    """
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if np.any(model.excess <= 0.0):
        raise ValueError(f"a_minus needs mu > r for every asset, got excess {model.excess.tolist()}")
    u = lambda a: _outer_face_max(model, driver, a)  # noqa: E731
    upper = 1.0 / gamma
    if u(upper) <= 0.0:
        return upper
    if u(0.0) > 0.0:
        logger.warning(":: s(0) > 0 for %s, every level is active", driver.describe())
        return -math.inf
    return float(bisect(u, 0.0, upper, xtol=1e-12))


def _chi_bounds(model: MarketModel, driver: Driver) -> Tuple[float, float]:
    values = [driver_on_allocation(driver, model, c) for c in _vertices(model.n)]
    low = min(values)
    if model.n == 2:
        result = minimize_scalar(
            lambda x: driver_on_allocation(driver, model, np.array([x, 1.0 - x])),
            bounds=(0.0, 1.0), method="bounded", options={"xatol": SEARCH_XATOL},
        )
        low = min(low, float(result.fun))
    # g^ is convex, so its maximum over each edge sits at a vertex
    return low, max(values)


@dataclass
class EquilibriumSolution:
    grid: np.ndarray
    a_star: np.ndarray
    C_star: np.ndarray
    b: np.ndarray
    d: np.ndarray
    a_minus: float
    t_star: float
    gamma: float
    degenerate: bool
    iterations: int = 0
    residual: float = 0.0
    g_star: Optional[np.ndarray] = None
    s_inverse_gamma: float = 0.0

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def v(self) -> np.ndarray:
        return self.b - self.gamma * self.d

    def value(self, t: float, x: float) -> float:
        """V(t, x) = x v(t)."""
        return x * float(np.interp(t, self.grid, self.v))

    def mean_function(self, t: float, x: float) -> float:
        """h(t, x) = x b(t) = E[X_T | X_t = x]."""
        return x * float(np.interp(t, self.grid, self.b))

    def policy(self) -> Policy:
        """Piecewise-constant C*, with t* as a breakpoint and 0 to its left."""
        grid = self.grid
        active = np.any(self.C_star != 0.0, axis=1)
        values = np.where(
            (active[:-1] & active[1:])[:, None],
            0.5 * (self.C_star[:-1] + self.C_star[1:]),
            self.C_star[1:] * active[1:, None],
        )
        cells = [(grid[i], values[i]) for i in range(grid.size - 1)]
        if grid[0] < self.t_star < grid[-1]:
            i = int(np.searchsorted(grid, self.t_star, side="right") - 1)
            if self.t_star > grid[i]:
                cells[i] = (grid[i], np.zeros(self.C_star.shape[1]))
                cells.insert(i + 1, (self.t_star, self.C_star[i + 1]))
        starts = np.array([start for start, _ in cells] + [grid[-1]])
        return Policy(starts, np.array([value for _, value in cells])).coalesced()

    def chi_bounds(self, model: MarketModel, driver: Driver) -> Tuple[float, float]:
        """(inf, sup) of g^ over the boundary of B."""
        return _chi_bounds(model, driver)

    def increments_within_bounds(self, model: MarketModel, driver: Driver, tol: float = 1e-8) -> bool:
        low, high = self.chi_bounds(model, driver)
        steps = np.diff(self.grid)
        increments = np.diff(self.a_star)
        return bool(np.all(increments >= low * steps - tol) and np.all(increments <= high * steps + tol))

    def summary(self) -> Dict[str, Any]:
        return {
            "a_minus": _finite_or_none(self.a_minus),
            "t_star": _finite_or_none(self.t_star),
            "s_inverse_gamma": self.s_inverse_gamma,
            "degenerate": self.degenerate,
            "iterations": self.iterations,
            "residual": self.residual,
            "gamma": self.gamma,
        }

    def to_frame(self) -> pd.DataFrame:
        columns = {"t": self.grid, "a_star": self.a_star}
        for j in range(self.C_star.shape[1]):
            columns[f"C_{j + 1}"] = self.C_star[:, j]
        columns.update({"b": self.b, "d": self.d, "v": self.v})
        return pd.DataFrame(columns)


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def _degenerate_solution(model: MarketModel, gamma: float, grid: np.ndarray, s_inv: float) -> EquilibriumSolution:
    b = np.exp(model.r * (grid[-1] - grid))
    return EquilibriumSolution(
        grid=grid,
        a_star=np.full(grid.size, 1.0 / gamma),
        C_star=np.zeros((grid.size, model.n)),
        b=b,
        d=np.zeros(grid.size),
        a_minus=1.0 / gamma,
        t_star=float(grid[-1]),
        gamma=gamma,
        degenerate=True,
        g_star=np.zeros(grid.size),
        s_inverse_gamma=s_inv,
    )


def _face_allocation(model: MarketModel, driver: Driver, a: float) -> np.ndarray:
    """Maximiser of T_a over the outer face {c in B : sum(c) = 1}."""
    if model.n == 1:
        return np.ones(1)
    candidates = [(c, objective_T(model, driver, a, c)) for c in _vertices(model.n)[1:]]
    candidates.append(_search_hypotenuse(model, driver, a))
    return _best(candidates).c


def _with_vertex_levels(levels: np.ndarray, weights: np.ndarray, weight) -> Tuple[np.ndarray, np.ndarray]:
    """Insert the levels where the face maximiser reaches or leaves a vertex."""
    at_vertex = (weights == 0.0) | (weights == 1.0)
    side = lambda a: 1.0 if weight(a) in (0.0, 1.0) else -1.0  # noqa: E731
    extra_levels, extra_weights = [], []
    for i in np.flatnonzero(at_vertex[:-1] != at_vertex[1:]):
        extra_levels.append(bisect(side, levels[i], levels[i + 1], xtol=1e-12))
        extra_weights.append(weights[i] if at_vertex[i] else weights[i + 1])
    if not extra_levels:
        return levels, weights
    merged, index = np.unique(np.concatenate([levels, extra_levels]), return_index=True)
    return merged, np.concatenate([weights, extra_weights])[index]


class _FaceTable:
    """Face maximiser C(a), its penalty g^(C(a)) and growth rate mu_C(a) as functions of the level.

    For two assets the first weight of C is tabulated once on [low, high] and
    interpolated with PCHIP, so every Picard sweep applies the same smooth map.
    """

    def __init__(self, model: MarketModel, driver: Driver, low: float, high: float, pool=None):
        self.model = model
        self.driver = driver
        self._interp = None
        if model.n == 1:
            return
        high = max(high, low + 1.0)
        levels = np.linspace(low, high, FACE_LEVELS)
        weight = lambda a: float(_face_allocation(model, driver, float(a))[0])  # noqa: E731
        weights = np.array(list(pool.map(weight, levels)) if pool is not None else [weight(a) for a in levels])
        levels, weights = _with_vertex_levels(levels, weights, weight)
        self.low, self.high = float(levels[0]), float(levels[-1])
        self._interp = PchipInterpolator(levels, weights)

    def allocations(self, levels: np.ndarray) -> np.ndarray:
        levels = np.atleast_1d(np.asarray(levels, dtype=float))
        if self._interp is None:
            return np.ones((levels.size, 1))
        x = np.clip(self._interp(np.clip(levels, self.low, self.high)), 0.0, 1.0)
        return np.column_stack([x, 1.0 - x])

    def evaluate(self, levels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        C = self.allocations(levels)
        if self._interp is None:
            G = np.full(C.shape[0], driver_on_allocation(self.driver, self.model, C[0]))
        else:
            G = np.array([driver_on_allocation(self.driver, self.model, c) for c in C])
        return C, G, self.model.r + C @ self.model.excess


def _level_range(model: MarketModel, driver: Driver, gamma: float, T: float, a_low: float) -> Tuple[float, float]:
    """Interval holding every level a sweep can produce."""
    chi_low, chi_high = _chi_bounds(model, driver)
    high = 1.0 / gamma - T * min(chi_low, 0.0)
    low = a_low if math.isfinite(a_low) else 1.0 / gamma - T * max(chi_high, 0.0)
    return low, high


@dataclass
class _Sweep:
    A: np.ndarray
    C: np.ndarray
    G: np.ndarray
    b: np.ndarray
    d: np.ndarray
    t_star: float


def _sweep(model, gamma, grid, f, a_low, faces: _FaceTable, edge: Tuple[float, float]) -> _Sweep:
    """A = 1/gamma - int_t^T g^(C(f(s))) ds, held at a_- left of the crossing time.

    ``edge`` holds (g^, mu_C) of the face maximiser at a_-, the values just
    right of the crossing.
    """
    C, G, rates = faces.evaluate(np.maximum(f, a_low))
    widths = np.diff(grid)
    integral = np.concatenate([np.cumsum((0.5 * widths * (G[:-1] + G[1:]))[::-1])[::-1], [0.0]])
    growth = 0.5 * widths * (rates[:-1] + rates[1:])
    A = 1.0 / gamma - integral
    t_star = -math.inf

    below = np.flatnonzero(A <= a_low)
    if below.size:
        k = int(below[-1])
        edge_G, edge_rate = edge
        # crossing tau solves A(t_{k+1}) - int_tau^{t_{k+1}} g^ ds = a_-, g^ linear on [tau, t_{k+1}]
        gap = A[k + 1] - a_low
        slope_sum = edge_G + G[k + 1]
        length = min(widths[k], 2.0 * gap / slope_sum) if slope_sum > 0.0 else widths[k]
        integral[: k + 1] = integral[k + 1] + 0.5 * length * slope_sum
        growth[k] = 0.5 * length * (edge_rate + rates[k + 1]) + model.r * (widths[k] - length)
        growth[:k] = model.r * widths[:k]
        C[: k + 1] = 0.0
        G[: k + 1] = 0.0
        A = 1.0 / gamma - integral
        if length < widths[k]:
            A[: k + 1] = a_low
        t_star = float(grid[k + 1] - length)

    b = np.exp(np.concatenate([np.cumsum(growth[::-1])[::-1], [0.0]]))
    return _Sweep(A=A, C=C, G=G, b=b, d=b * integral, t_star=t_star)


def fixed_point(
    model: MarketModel,
    driver: Driver,
    gamma: float,
    T: float,
    grid_size: int = 4096,
    tol: float = 1e-10,
    max_iter: int = 500,
    damping: float = 0.5,
    workers: int = 1,
) -> EquilibriumSolution:
    """Damped Picard iteration for a* on a uniform grid of ``grid_size`` cells."""
    if grid_size < 64:
        raise ValueError(f"grid_size must be >= 64, got {grid_size}")
    if tol <= 0.0:
        raise ValueError(f"tol must be positive, got {tol}")
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must lie in (0, 1], got {damping}")
    if gamma <= 0.0 or T <= 0.0:
        raise ValueError(f"gamma and T must be positive, got gamma={gamma}, T={T}")

    grid = T * np.arange(grid_size + 1) / grid_size
    top = maximize_boundary(model, driver, 1.0 / gamma)
    if not np.any(top.c):
        logger.info(":: s(1/gamma) = %.3g <= 0, riskless policy is the equilibrium", top.s)
        return _degenerate_solution(model, gamma, grid, top.s)

    a_low = a_minus(model, driver, gamma)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        faces = _FaceTable(model, driver, *_level_range(model, driver, gamma, T, a_low), pool=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    if math.isfinite(a_low):
        _, edge_G, edge_rate = faces.evaluate([a_low])
        edge = (float(edge_G[0]), float(edge_rate[0]))
    else:
        edge = (0.0, model.r)

    f = np.full(grid.size, 1.0 / gamma)
    change = math.inf
    iterations = 0
    while change >= tol:
        if iterations >= max_iter:
            raise ConvergenceError(iterations, change)
        sweep = _sweep(model, gamma, grid, f, a_low, faces, edge)
        updated = (1.0 - damping) * f + damping * sweep.A
        change = float(np.max(np.abs(updated - f)))
        f = updated
        iterations += 1
        logger.debug(":: iteration %d, sup change %.3e", iterations, change)

    final = _sweep(model, gamma, grid, f, a_low, faces, edge)
    residual = float(np.max(np.abs(f - final.A)))
    if residual >= 10.0 * tol:
        raise ConvergenceError(iterations, residual, f"residual certificate failed: {residual:.3e} >= {10.0 * tol:.3e}")
    logger.info(":: fixed point converged after %d iterations, residual %.3e", iterations, residual)

    return EquilibriumSolution(
        grid=grid,
        a_star=final.A,
        C_star=final.C,
        b=final.b,
        d=final.d,
        a_minus=a_low,
        t_star=final.t_star,
        gamma=gamma,
        degenerate=False,
        iterations=iterations,
        residual=residual,
        g_star=final.G,
        s_inverse_gamma=top.s,
    )


def single_asset_closed_form(
    mu: float,
    r: float,
    Sigma: float,
    R: float,
    nu2: float,
    gamma: float,
    T: float,
    grid_size: int = 4096,
) -> EquilibriumSolution:
    """Explicit equilibrium for one risky asset and the joint-norm driver with lam = 1.

    kappa = sqrt(Sigma^2 + R^2 nu2), a_- = kappa / (mu - r) and the switch time
    is t* = T + 1/(mu - r) - 1/(gamma kappa). Above t*: pi = 1 and
    a*(t) = 1/gamma - kappa (T - t); below it pi = 0 and a* = a_-.
    """
    if mu <= r or r < 0.0:
        raise ValueError(f"need mu > r >= 0, got mu={mu}, r={r}")
    if Sigma < 0.0 or not 0.0 <= R <= 1.0 or nu2 < 0.0:
        raise ValueError(f"need Sigma >= 0, 0 <= R <= 1, nu2 >= 0, got {Sigma}, {R}, {nu2}")
    if gamma <= 0.0 or T <= 0.0:
        raise ValueError(f"gamma and T must be positive, got gamma={gamma}, T={T}")
    kappa = math.sqrt(Sigma**2 + R**2 * nu2)
    if kappa <= 0.0:
        raise ValueError("the risky asset must carry risk (Sigma^2 + R^2 nu2 > 0)")

    grid = T * np.arange(grid_size + 1) / grid_size
    low = kappa / (mu - r)
    s_inv = max(0.0, (mu - r) / gamma - kappa)
    switch = T + 1.0 / (mu - r) - 1.0 / (gamma * kappa)
    if switch >= T:
        model_rate = np.exp(r * (T - grid))
        return EquilibriumSolution(
            grid=grid, a_star=np.full(grid.size, 1.0 / gamma), C_star=np.zeros((grid.size, 1)),
            b=model_rate, d=np.zeros(grid.size), a_minus=1.0 / gamma, t_star=T, gamma=gamma,
            degenerate=True, g_star=np.zeros(grid.size), s_inverse_gamma=s_inv,
        )

    active = grid > switch
    horizon = T - np.maximum(grid, switch)
    b = np.exp(mu * horizon + r * np.clip(switch - grid, 0.0, None))
    return EquilibriumSolution(
        grid=grid,
        a_star=np.where(active, 1.0 / gamma - kappa * (T - grid), low),
        C_star=active.astype(float)[:, None],
        b=b,
        d=b * kappa * horizon,
        a_minus=low,
        t_star=switch if switch >= 0.0 else -math.inf,
        gamma=gamma,
        degenerate=False,
        g_star=kappa * active,
        s_inverse_gamma=s_inv,
    )


def printed_switch_curve(mu: float, r: float, gamma: float, T: float, t: float) -> float:
    """(1/gamma) / (1 + (mu - r)(T - t)): shares a*(T) and the crossing of a_- with the linear level."""
    return (1.0 / gamma) / (1.0 + (mu - r) * (T - t))


@dataclass(frozen=True)
class TwoAssetParams:
    s1_sq: float
    s2_sq: float
    s12: float
    spread: float

    @classmethod
    def from_model(cls, model: MarketModel) -> "TwoAssetParams":
        if model.n != 2 or model.sigma.shape[1] != 2 or model.R.shape[1] != 2:
            raise ValueError("two-asset closed form needs n = d = k = 2")
        if not model.mu[0] > model.mu[1] > model.r:
            raise ValueError(f"need mu_1 > mu_2 > r, got mu={model.mu.tolist()}, r={model.r}")
        S = model.sigma @ model.sigma.T + model.R @ model.measure.second_moment_matrix() @ model.R.T
        if not S[0, 1] < 0.0:
            raise ValueError(f"need a negative covariance term s_12, got {S[0, 1]}")
        return cls(float(S[0, 0]), float(S[1, 1]), float(S[0, 1]),
                   float(model.mu[0] - model.mu[1]))

    @property
    def d_plus(self) -> float:
        return self.s1_sq + self.s2_sq - 2.0 * self.s12

    @property
    def e_plus(self) -> float:
        return self.s12 - self.s2_sq

    @property
    def a_plus(self) -> float:
        return (self.s1_sq - self.s12) / (self.spread * math.sqrt(self.s1_sq))

    def eta(self, a: float) -> float:
        scaled = a**2 * self.spread**2
        if scaled >= self.d_plus:
            raise ValueError(f"a={a} is outside [0, sqrt(d_+)/(mu_1 - mu_2)) where c_+ is defined")
        return (scaled * self.s2_sq - self.e_plus**2) / (self.d_plus * (scaled - self.d_plus))

    def c_plus(self, a: float) -> float:
        ratio = self.e_plus / self.d_plus
        return -ratio + math.sqrt(ratio**2 - self.eta(a))


def two_asset_closed_form(params: TwoAssetParams, a: float, a_low: float) -> np.ndarray:
    """Equilibrium allocation at level a for two assets and the joint-norm driver."""
    if a <= a_low:
        return np.zeros(2)
    if a > max(a_low, params.a_plus):
        return np.array([1.0, 0.0])
    c = params.c_plus(a)
    return np.array([c, 1.0 - c])


def generator_linear(model: MarketModel, c: Sequence[float], w: float, x: float) -> Tuple[float, float]:
    """L^pi applied to x -> x w: (mu_pi x w, direct evaluation with the atom sum)."""
    c = np.asarray(c, dtype=float)
    f = lambda z: z * w  # noqa: E731
    slope = w
    moves = x * model.jump_payoff(c)
    jump_terms = f(x + moves) - f(x) - moves * slope
    direct = model.mu_pi(c) * x * slope + float(model.measure.masses @ jump_terms)
    return model.mu_pi(c) * x * w, direct


def deviation_operator(model: MarketModel, driver: Driver, c: Sequence[float], b: float, x: float) -> float:
    """G^pi h for h(t, x) = x b."""
    c = np.asarray(c, dtype=float)
    return driver.eval(x * b * model.sigma_pi(c), x * b * model.jump_payoff(c))


@dataclass
class HJBResidual:
    t: float
    x: float
    res_V: float
    res_h: float
    excluded: bool = False
    consistency: float = 0.0


def _interior_node(solution: EquilibriumSolution, t: float) -> int:
    i = int(np.argmin(np.abs(solution.grid - t)))
    return int(np.clip(i, 1, solution.grid.size - 2))


def _near_switch(solution: EquilibriumSolution, i: int) -> bool:
    if solution.degenerate or not math.isfinite(solution.t_star):
        return False
    width = float(solution.grid[1] - solution.grid[0])
    return abs(solution.grid[i] - solution.t_star) <= width * (1.0 + 1e-9)


def hjb_residual(
    model: MarketModel,
    driver: Driver,
    gamma: float,
    solution: EquilibriumSolution,
    t: float,
    x: float,
) -> HJBResidual:
    """Residuals of the extended HJB system at the grid node nearest to t.

    res_V = V' + sup_B {L^pi V - gamma G^pi h} with V = x v, h = x b. The
    supremum sits at the boundary maximiser for the level A = v / (gamma b)
    (0 belongs to the boundary). res_h = h' + L^{C*} h.

    ``consistency`` is the largest gap between the operators and their
    closed forms: the atom sum of L^pi against mu_pi x w, and G^pi h against
    x b g^(pi).
    """
    if x <= 0.0:
        raise ValueError(f"x must be positive, got {x}")
    i = _interior_node(solution, t)
    grid, v, b = solution.grid, solution.v, solution.b
    step = grid[i + 1] - grid[i - 1]
    v_dot = (v[i + 1] - v[i - 1]) / step
    b_dot = (b[i + 1] - b[i - 1]) / step
    best = maximize_boundary(model, driver, v[i] / (gamma * b[i])).c

    generated, direct = generator_linear(model, best, v[i], x)
    penalty = deviation_operator(model, driver, best, b[i], x)
    h_generated, h_direct = generator_linear(model, solution.C_star[i], b[i], x)
    consistency = max(
        abs(generated - direct),
        abs(h_generated - h_direct),
        abs(penalty - x * b[i] * driver_on_allocation(driver, model, best)),
    )

    res_V = x * v_dot + generated - gamma * penalty
    res_h = x * b_dot + h_generated
    excluded = _near_switch(solution, i)
    if excluded:
        logger.warning(":: t=%.6g is within one cell of t*=%.6g, residual excluded", grid[i], solution.t_star)
    return HJBResidual(float(grid[i]), x, float(res_V), float(res_h), excluded, float(consistency))


def hjb_table(
    model: MarketModel,
    driver: Driver,
    gamma: float,
    solution: EquilibriumSolution,
    xs: Sequence[float],
    times: Optional[Sequence[float]] = None,
) -> pd.DataFrame:
    """Residual table over a (t, x) grid; defaults to every interior node."""
    times = solution.grid[1:-1] if times is None else times
    rows = []
    for t in times:
        for x in xs:
            rows.append(hjb_residual(model, driver, gamma, solution, float(t), float(x)).__dict__)
    return pd.DataFrame(rows, columns=["t", "x", "res_V", "res_h", "excluded", "consistency"])


@dataclass
class ODEResiduals:
    t: np.ndarray
    res_b: np.ndarray
    res_d: np.ndarray
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def max_abs(self) -> float:
        keep = ~self.excluded
        if not np.any(keep):
            return 0.0
        return float(max(np.max(np.abs(self.res_b[keep])), np.max(np.abs(self.res_d[keep]))))


def ode_residuals(solution: EquilibriumSolution, model: MarketModel, driver: Driver) -> ODEResiduals:
    """b' + mu_C b = 0 and d' + mu_C d + b g^(C) = 0 by central differences at interior nodes."""
    grid, b, d = solution.grid, solution.b, solution.d
    step = grid[2:] - grid[:-2]
    b_dot = (b[2:] - b[:-2]) / step
    d_dot = (d[2:] - d[:-2]) / step
    inner = slice(1, -1)
    rates = np.array([model.mu_pi(c) for c in solution.C_star[inner]])
    penalty = np.array([driver_on_allocation(driver, model, c) for c in solution.C_star[inner]])
    excluded = np.array([_near_switch(solution, i) for i in range(1, grid.size - 1)])
    return ODEResiduals(
        t=grid[inner],
        res_b=b_dot + rates * b[inner],
        res_d=d_dot + rates * d[inner] + b[inner] * penalty,
        excluded=excluded,
    )
