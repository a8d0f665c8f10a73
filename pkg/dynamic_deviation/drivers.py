"""Driver functions g(h, h~) for g-deviation measures.

``h`` is a diffusion coefficient in R^d and ``h~`` a jump payoff given by its
values on the atoms of a finite Levy measure, so every integral against the
measure is an exact weighted sum.

Drivers:
- ScaledSplitNorm(c, d):  c|h| + d ||h~||
- ScaledJointNorm(lam):   lam * sqrt(|h|^2 + ||h~||^2)
- CvarJump(a):            lower-tail average of h~ over measure mass a

where ||h~||^2 = sum_j lambda_j h~_j^2.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Union

import numpy as np

from .jumps import LevyMeasure

logger = logging.getLogger(__name__)

HOMOGENEITY_TOL = 1e-12
SUBADDITIVITY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class JumpPayoff:
    """Values of a jump payoff on the atoms of ``measure``."""

    values: np.ndarray
    measure: LevyMeasure

    def __post_init__(self):
        values = np.array(np.atleast_1d(self.values), dtype=float)
        if values.ndim != 1 or values.shape[0] != len(self.measure):
            raise ValueError(
                f"payoff has {values.size} values but the measure has {len(self.measure)} atoms"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zero(cls, measure: LevyMeasure) -> "JumpPayoff":
        return cls(np.zeros(len(measure)), measure)

    @classmethod
    def linear(cls, measure: LevyMeasure, direction: np.ndarray) -> "JumpPayoff":
        """The payoff y -> direction^T y."""
        direction = np.asarray(direction, dtype=float)
        if direction.shape != (measure.dimension,):
            raise ValueError(
                f"direction must have length {measure.dimension}, got shape {direction.shape}"
            )
        return cls(measure.locations @ direction, measure)

    def l2_norm(self) -> float:
        return math.sqrt(float(np.dot(self.measure.masses, self.values**2)))

    def __neg__(self) -> "JumpPayoff":
        return JumpPayoff(-self.values, self.measure)

    def __add__(self, other: "JumpPayoff") -> "JumpPayoff":
        return JumpPayoff(self.values + other.values, self.measure)

    def __mul__(self, factor: float) -> "JumpPayoff":
        return JumpPayoff(self.values * factor, self.measure)

    __rmul__ = __mul__


PayoffLike = Union[JumpPayoff, np.ndarray, List[float]]


def lower_tail_average(values: np.ndarray, masses: np.ndarray, level: float) -> float:
    """Mass-weighted average of the smallest values over total mass ``level``, negated.

    The marginal value is split proportionally so the result is exact for
    discrete distributions.
    """
    values = np.asarray(values, dtype=float)
    masses = np.asarray(masses, dtype=float)
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    sorted_masses = masses[order]
    before = np.cumsum(sorted_masses) - sorted_masses
    taken = np.clip(level - before, 0.0, sorted_masses)
    return -float(np.dot(taken, sorted_values)) / level


def cvar_nu(a: float, htilde: PayoffLike, measure: LevyMeasure) -> float:
    """CVaR of the jump payoff under the (unnormalised) measure at mass level a."""
    total = measure.total_mass()
    if not 0.0 < a < total:
        raise ValueError(f"CVaR level a must lie in (0, {total}), got {a}")
    values = _payoff_values(htilde, measure)
    return lower_tail_average(values, measure.masses, a)


def _payoff_values(htilde: PayoffLike, measure: LevyMeasure) -> np.ndarray:
    if isinstance(htilde, JumpPayoff):
        if htilde.measure is not measure and htilde.measure != measure:
            raise ValueError("jump payoff refers to a different Levy measure")
        return htilde.values
    values = np.atleast_1d(np.asarray(htilde, dtype=float))
    if values.shape != (len(measure),):
        raise ValueError(
            f"payoff has {values.size} values but the measure has {len(measure)} atoms"
        )
    return values


class Driver(ABC):
    """Base class; subclasses are immutable and ``eval`` is pure."""

    convex: bool = True
    positively_homogeneous: bool = True
    positive: bool = True
    is_symmetric: bool = True

    measure: LevyMeasure

    def eval(self, h: np.ndarray, htilde: PayoffLike) -> float:
        h = np.atleast_1d(np.asarray(h, dtype=float))
        if h.ndim != 1:
            raise ValueError(f"diffusion coefficient must be a vector, got shape {h.shape}")
        return self._eval(h, _payoff_values(htilde, self.measure))

    def __call__(self, h: np.ndarray, htilde: PayoffLike) -> float:
        return self.eval(h, htilde)

    @abstractmethod
    def _eval(self, h: np.ndarray, values: np.ndarray) -> float:
        ...

    @abstractmethod
    def growth_constant(self) -> float:
        """K with |g|^2 <= 1 + K^2 |h|^2 + K^2 ||h~||^2."""

    def scaled(self, factor: float) -> "Driver":
        return Scaled(self, factor)

    def _l2(self, values: np.ndarray) -> float:
        return math.sqrt(float(np.dot(self.measure.masses, values * values)))

    def describe(self) -> Dict[str, Any]:
        return {"kind": type(self).__name__}


@dataclass(frozen=True, eq=False)
class ScaledSplitNorm(Driver):
    c: float
    d: float
    measure: LevyMeasure

    def __post_init__(self):
        if not (self.c > 0 and self.d > 0):
            raise ValueError(f"ScaledSplitNorm needs c > 0 and d > 0, got c={self.c}, d={self.d}")

    def _eval(self, h, values):
        return self.c * float(np.linalg.norm(h)) + self.d * self._l2(values)

    def growth_constant(self):
        return math.sqrt(2.0) * max(self.c, self.d)

    def scaled(self, factor):
        return ScaledSplitNorm(self.c * factor, self.d * factor, self.measure)

    def describe(self):
        return {"kind": "split_norm", "c": self.c, "d": self.d}


@dataclass(frozen=True, eq=False)
class ScaledJointNorm(Driver):
    lam: float
    measure: LevyMeasure

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"ScaledJointNorm needs lam > 0, got {self.lam}")

    def _eval(self, h, values):
        return self.lam * math.sqrt(float(h @ h) + float(np.dot(self.measure.masses, values * values)))

    def growth_constant(self):
        return self.lam

    def scaled(self, factor):
        return ScaledJointNorm(self.lam * factor, self.measure)

    def describe(self):
        return {"kind": "joint_norm", "lam": self.lam}


@dataclass(frozen=True, eq=False)
class CvarJump(Driver):
    """Penalises large negative jump payoffs; ignores h.

    Not positive: a payoff that is positive on every atom has negative CVaR.
    """

    a: float
    measure: LevyMeasure

    positive = False
    is_symmetric = False

    def __post_init__(self):
        total = self.measure.total_mass()
        if not 0.0 < self.a < total:
            raise ValueError(f"CvarJump level a must lie in (0, {total}), got {self.a}")

    def _eval(self, h, values):
        return lower_tail_average(values, self.measure.masses, self.a)

    def growth_constant(self):
        return math.sqrt(self.measure.total_mass()) / self.a

    def describe(self):
        return {"kind": "cvar_jump", "a": self.a}


@dataclass(frozen=True, eq=False)
class Scaled(Driver):
    """factor * base."""

    base: Driver
    factor: float
    measure: LevyMeasure = field(init=False)

    def __post_init__(self):
        if not self.factor > 0:
            raise ValueError(f"scale factor must be positive, got {self.factor}")
        object.__setattr__(self, "measure", self.base.measure)
        object.__setattr__(self, "positive", self.base.positive)
        object.__setattr__(self, "is_symmetric", self.base.is_symmetric)

    def _eval(self, h, values):
        return self.factor * self.base._eval(h, values)

    def growth_constant(self):
        return self.factor * self.base.growth_constant()

    def scaled(self, factor):
        return Scaled(self.base, self.factor * factor)

    def describe(self):
        return {**self.base.describe(), "scale": self.factor}


def build_driver(kind: str, measure: LevyMeasure, **params: float) -> Driver:
    """Driver from its config name."""
    if kind == "split_norm":
        return ScaledSplitNorm(float(params["c"]), float(params["d"]), measure)
    if kind == "joint_norm":
        return ScaledJointNorm(float(params.get("lam", 1.0)), measure)
    if kind == "cvar_jump":
        return CvarJump(float(params["a"]), measure)
    raise ValueError(f"unknown driver kind '{kind}' (expected split_norm, joint_norm or cvar_jump)")


@dataclass
class AxiomCheck:
    """Outcome of one randomized property check."""
    name: str
    passed: bool
    max_violation: float
    samples: int
    expected_failure: bool = False
    message: str = ""


@dataclass
class DriverAxiomReport:
    driver: Dict[str, Any]
    checks: List[AxiomCheck]

    @property
    def passed(self) -> bool:
        """True when every check passed or failed in a documented way."""
        return all(check.passed or check.expected_failure for check in self.checks)

    def check(self, name: str) -> AxiomCheck:
        return next(c for c in self.checks if c.name == name)


def _random_point(rng: np.random.Generator, h_dim: int, atoms: int):
    return rng.standard_normal(h_dim), rng.standard_normal(atoms)


def check_driver_axioms(
    driver: Driver,
    samples: int,
    stream: np.random.Generator,
    h_dim: int = 2,
) -> DriverAxiomReport:
    """Randomized checks of homogeneity, subadditivity, positivity, growth and symmetry."""
    atoms = len(driver.measure)
    homogeneity = subadditivity = growth = symmetry = 0.0
    positivity_failures = 0

    for _ in range(samples):
        h1, v1 = _random_point(stream, h_dim, atoms)
        h2, v2 = _random_point(stream, h_dim, atoms)
        kappa = float(10.0 ** stream.uniform(-3.0, 3.0))

        g1 = driver.eval(h1, v1)
        g2 = driver.eval(h2, v2)
        scaled = driver.eval(kappa * h1, kappa * v1)
        homogeneity = max(homogeneity, abs(scaled - kappa * g1) / max(1.0, abs(kappa * g1)))

        joint = driver.eval(h1 + h2, v1 + v2)
        subadditivity = max(subadditivity, joint - (g1 + g2))

        norm_sq = float(h1 @ h1) + float(np.dot(driver.measure.masses, v1 * v1))
        bound = 1.0 + driver.growth_constant() ** 2 * norm_sq
        growth = max(growth, g1 * g1 - bound * (1.0 + 1e-12))

        mirrored = driver.eval(-h1, -v1)
        symmetry = max(symmetry, abs(mirrored - g1) / max(1.0, abs(g1)))

        if g1 <= 0.0:
            positivity_failures += 1

    # constant upward payoff separates positive drivers from CvarJump
    upward = driver.eval(np.zeros(h_dim), np.ones(atoms)) if atoms else 1.0
    if upward <= 0.0:
        positivity_failures += 1

    checks = [
        AxiomCheck("positive_homogeneity", homogeneity <= HOMOGENEITY_TOL, homogeneity, samples),
        AxiomCheck("subadditivity", subadditivity <= SUBADDITIVITY_TOL, max(subadditivity, 0.0), samples),
        AxiomCheck("linear_growth", growth <= 0.0, max(growth, 0.0), samples),
    ]

    positivity_ok = positivity_failures == 0
    positivity = AxiomCheck(
        "positivity",
        positivity_ok,
        float(positivity_failures),
        samples + 1,
        expected_failure=not driver.positive,
        message="" if positivity_ok else f"g <= 0 at {positivity_failures} nonzero points (constant upward payoff: {upward:.6g})",
    )
    if not positivity_ok:
        level = logging.INFO if positivity.expected_failure else logging.WARNING
        logger.log(level, ":: %s positivity violated (%s)", type(driver).__name__, positivity.message)
    checks.append(positivity)

    symmetric = symmetry <= HOMOGENEITY_TOL
    checks.append(AxiomCheck(
        "symmetry",
        symmetric == driver.is_symmetric,
        symmetry,
        samples,
        message="symmetric" if symmetric else "asymmetric",
    ))
    return DriverAxiomReport(driver=driver.describe(), checks=checks)
