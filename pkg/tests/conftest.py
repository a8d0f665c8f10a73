import pathlib

import numpy as np
import pytest

from dynamic_deviation.deviation import RepresentingPair
from dynamic_deviation.drivers import ScaledJointNorm
from dynamic_deviation.jumps import LevyMeasure
from dynamic_deviation.market import MarketModel
from dynamic_deviation.streams import stream

CONFIG_DIR = pathlib.Path(__file__).parent.parent / "configs"

# n = 1 benchmark: mu - r = 0.06, Sigma = 0.2, gamma = 0.1, T = 40
BENCH_R = 0.02
BENCH_MU = 0.08
BENCH_SIGMA = 0.2
BENCH_GAMMA = 0.1
BENCH_T = 40.0
BENCH_T_STAR = 40.0 + 1.0 / 0.06 - 1.0 / (0.1 * 0.2)


def random_pairs(rng, count, grid, measure, h_dim=2):
    """Random representing pairs sharing ``grid`` and ``measure``."""
    cells = len(grid) - 1
    return [
        RepresentingPair(
            np.asarray(grid, dtype=float),
            rng.standard_normal((cells, h_dim)),
            rng.standard_normal((cells, len(measure))),
            measure,
        )
        for _ in range(count)
    ]


@pytest.fixture
def rng():
    return stream(2024)


@pytest.fixture
def three_atoms():
    return LevyMeasure(np.array([[0.1], [-0.2], [0.4]]), np.array([1.0, 0.5, 2.0]))


@pytest.fixture
def benchmark_model():
    return MarketModel(BENCH_R, [BENCH_MU], [[BENCH_SIGMA]], [[0.0]], LevyMeasure.empty(1))


@pytest.fixture
def jump_model():
    return MarketModel(BENCH_R, [BENCH_MU], [[BENCH_SIGMA]], [[0.3]],
                       LevyMeasure(np.array([[0.1]]), np.array([2.0])))


@pytest.fixture
def two_asset_model():
    measure = LevyMeasure(np.array([[0.3, -0.2], [-0.2, 0.3]]), np.array([0.5, 0.5]))
    return MarketModel(0.02, [0.10, 0.06], [[0.2, 0.0], [0.0, 0.1]], np.eye(2), measure)


@pytest.fixture
def joint_norm():
    """ScaledJointNorm(1) on a model's Levy measure."""
    return lambda model, lam=1.0: ScaledJointNorm(lam, model.measure)


@pytest.fixture
def config_dir():
    return CONFIG_DIR
