"""Deterministic random streams.

Every Monte Carlo draw in the package comes from a ``numpy.random.Generator``
built from a ``SeedSequence`` over an integer key, so results depend only on
the key and never on worker count or completion order.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

# Paths are simulated in blocks of this size; the block index is part of the key.
PATH_BLOCK = 8192


def stream(*key: int) -> np.random.Generator:
    """Generator for an integer key such as ``(seed, block, cell)``."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def path_blocks(n_paths: int, block: int = PATH_BLOCK) -> Iterable[tuple[int, slice]]:
    """Yield ``(block_index, slice)`` pairs covering ``range(n_paths)``."""
    for index, start in enumerate(range(0, n_paths, block)):
        yield index, slice(start, min(start + block, n_paths))
