"""Finite-activity Levy measures.

A measure is a finite list of weighted atoms ``(y_j, lambda_j)`` in R^k. All
jump integrals are exact sums over the atoms and compound-Poisson sampling is
exact (no small-jump truncation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LevyMeasure:
    """Weighted atoms in R^k; ``masses`` are intensities per unit time."""

    locations: np.ndarray
    masses: np.ndarray
    dimension: int = field(default=0)

    def __post_init__(self):
        masses = np.atleast_1d(np.asarray(self.masses, dtype=float))
        locations = np.asarray(self.locations, dtype=float)
        dimension = int(self.dimension)
        if locations.size == 0:
            if dimension < 1:
                raise ValueError("empty LevyMeasure needs an explicit dimension >= 1")
            locations = np.zeros((0, dimension))
        else:
            if locations.ndim == 1:
                locations = locations.reshape(len(masses), -1) if len(masses) else locations[None, :]
            if dimension and locations.shape[1] != dimension:
                raise ValueError(
                    f"atom dimension {locations.shape[1]} does not match dimension={dimension}"
                )
            dimension = locations.shape[1]
        if locations.shape[0] != masses.shape[0]:
            raise ValueError(
                f"{locations.shape[0]} atom locations but {masses.shape[0]} masses"
            )
        if not np.all(np.isfinite(locations)) or not np.all(np.isfinite(masses)):
            raise ValueError("atom locations and masses must be finite")
        if np.any(masses <= 0.0):
            raise ValueError(f"atom masses must be > 0, got {masses.tolist()}")
        if locations.shape[0] and np.any(locations.min(axis=1) <= -1.0):
            bad = np.flatnonzero(locations.min(axis=1) <= -1.0).tolist()
            raise ValueError(f"atoms {bad} have a coordinate <= -1 (wealth would not stay positive)")
        object.__setattr__(self, "locations", _frozen(locations))
        object.__setattr__(self, "masses", _frozen(masses))
        object.__setattr__(self, "dimension", dimension)

    @classmethod
    def empty(cls, dimension: int) -> "LevyMeasure":
        return cls(np.zeros((0, dimension)), np.zeros(0), dimension)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], dimension: int | None = None) -> "LevyMeasure":
        """Build from config rows ``(y_1, ..., y_k, lambda)``."""
        rows = [list(map(float, row)) for row in rows]
        if not rows:
            if dimension is None:
                raise ValueError("dimension is required for an empty atom list")
            return cls.empty(dimension)
        widths = {len(row) for row in rows}
        if len(widths) != 1 or widths.pop() < 2:
            raise ValueError("atom rows must all have the form (y_1, ..., y_k, lambda)")
        table = np.array(rows)
        return cls(table[:, :-1], table[:, -1], dimension or table.shape[1] - 1)

    def to_rows(self) -> list[list[float]]:
        return [list(y) + [float(lam)] for y, lam in zip(self.locations.tolist(), self.masses)]

    def __len__(self) -> int:
        return int(self.masses.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LevyMeasure):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.masses, other.masses)
        )

    def __hash__(self) -> int:
        return hash((self.dimension, self.locations.tobytes(), self.masses.tobytes()))

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def concat(self, other: "LevyMeasure") -> "LevyMeasure":
        if other.dimension != self.dimension:
            raise ValueError("cannot concatenate measures of different dimension")
        return LevyMeasure(
            np.vstack([self.locations, other.locations]),
            np.concatenate([self.masses, other.masses]),
            self.dimension,
        )

    def second_moment_matrix(self) -> np.ndarray:
        """M = sum_j lambda_j y_j y_j^T (k x k)."""
        return (self.locations * self.masses[:, None]).T @ self.locations


def nu2(measure: LevyMeasure) -> float:
    """sum_j lambda_j |y_j|^2."""
    return float(np.dot(measure.masses, np.sum(measure.locations**2, axis=1)))


def mean_vector(measure: LevyMeasure) -> np.ndarray:
    """m_i = sum_j lambda_j y_{j,i}; the compensator drift of the jump martingale."""
    return measure.masses @ measure.locations if len(measure) else np.zeros(measure.dimension)


def sample_counts(measure: LevyMeasure, dt: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Poisson(lambda_j * dt) counts, shape ``(n, atoms)``."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not len(measure):
        return np.zeros((n, 0), dtype=np.int64)
    return rng.poisson(measure.masses * dt, size=(n, len(measure)))


def sample_jumps(measure: LevyMeasure, dt: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Jump vectors of the compound Poisson process over an interval of length dt."""
    counts = sample_counts(measure, dt, 1, rng)[0]
    jumps: list[np.ndarray] = []
    for location, count in zip(measure.locations, counts):
        jumps.extend(location.copy() for _ in range(int(count)))
    return jumps
