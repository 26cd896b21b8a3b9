"""Shared strategies and brute-force helpers for the test suite."""

import numpy as np
from hypothesis import strategies as st

from ssta.grid import GridSpec, TileSpec, WindowSpec


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def random_tiles(rng: np.random.Generator, grid: GridSpec) -> TileSpec:
    return TileSpec(*(int(rng.choice(divisors(n))) for n in grid.thw))


def random_window(rng: np.random.Generator, block_grid) -> WindowSpec:
    return WindowSpec(*(2 * int(rng.integers(0, n + 1)) + 1 for n in block_grid))


@st.composite
def grid_and_tiles(draw, max_extent=6, max_heads=3, dims=(4, 8)):
    thw = [draw(st.integers(1, max_extent)) for _ in range(3)]
    tiles = [draw(st.sampled_from(divisors(n))) for n in thw]
    grid = GridSpec(draw(st.integers(1, max_heads)), *thw, draw(st.sampled_from(dims)))
    return grid, TileSpec(*tiles)


@st.composite
def block_grids(draw, max_blocks=6):
    return tuple(draw(st.integers(1, max_blocks)) for _ in range(3))


@st.composite
def windows(draw, block_grid):
    return WindowSpec(*(2 * draw(st.integers(0, n)) + 1 for n in block_grid))
