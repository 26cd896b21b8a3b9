"""Mask density, exact MAC accounting and error norms."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .grid import GridSpec, TileSpec
from .masking import BlockMask


@dataclass(frozen=True)
class DensityReport:
    set_pairs: int
    total_pairs: int
    density: float
    sparse_macs: int
    dense_macs: int
    mask_overhead_macs: int
    theoretical_speedup: float

    @property
    def exact_density(self) -> Fraction:
        return Fraction(self.set_pairs, self.total_pairs)

    def to_dict(self) -> dict:
        return asdict(self)


def pair_macs(grid: GridSpec, tiles: TileSpec) -> int:
    """QK^T plus PV multiply-accumulates for one (head, query block, key block) pair."""
    return 2 * tiles.block_tokens**2 * grid.head_dim


def mask_overhead_macs(grid: GridSpec, tiles: TileSpec, with_redundancy: bool = True) -> int:
    h, d, n, b = grid.heads, grid.head_dim, tiles.block_tokens, tiles.block_count(grid)
    pooling = 2 * h * grid.token_count * d
    similarity = h * b * b * d
    # block sum (N*D), its squared norm (D), token squared norms (N*D)
    redundancy = h * b * (2 * n + 1) * d if with_redundancy else 0
    return pooling + similarity + redundancy


def density(mask: BlockMask, grid: GridSpec, tiles: TileSpec, with_redundancy: bool = True) -> DensityReport:
    blocks = tiles.block_count(grid)
    if mask.block_count != blocks:
        raise ValueError(f"mask covers {mask.block_count} blocks but tiles/grid give {blocks}")
    set_pairs = int(mask.per_head(grid.heads).sum())
    total_pairs = grid.heads * blocks * blocks
    per_pair = pair_macs(grid, tiles)
    sparse = set_pairs * per_pair
    dense = total_pairs * per_pair
    overhead = mask_overhead_macs(grid, tiles, with_redundancy)
    return DensityReport(
        set_pairs=set_pairs,
        total_pairs=total_pairs,
        density=set_pairs / total_pairs,
        sparse_macs=sparse,
        dense_macs=dense,
        mask_overhead_macs=overhead,
        theoretical_speedup=dense / (sparse + overhead),
    )


@dataclass(frozen=True)
class ErrorReport:
    max_abs: float
    mean_abs: float
    relative_l2: float

    def to_dict(self) -> dict:
        return asdict(self)


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "o", x), dtype=np.float64)


def compare(a, b) -> ErrorReport:
    """Error of ``a`` against reference ``b`` (arrays or AttentionOutput)."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    err = float(np.sqrt(np.sum(diff * diff)))
    ref = float(np.sqrt(np.sum(b * b)))
    if err == 0.0:
        rel = 0.0
    else:
        rel = err / ref if ref > 0 else float("inf")
    return ErrorReport(max_abs=float(diff.max()), mean_abs=float(diff.mean()), relative_l2=rel)
