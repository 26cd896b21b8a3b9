"""Block scoring, selective top-k masks, sliding-tile window masks.

Score math runs in float64 through numpy reductions and ``np.einsum`` (which
never dispatches to BLAS), so mask bits do not depend on BLAS threading.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import ConfigError, GridSpec, TileSpec, WindowSpec

COMBINE_MODES = ("intersection", "union")
REDUNDANCY_NORMS = ("mean", "paper")
MASK_KINDS = ("selective", "sta", "combined")


@dataclass(frozen=True)
class SstaConfig:
    lambda_: float = 1.0
    beta: float = 1.0
    top_k: int = 8
    window: WindowSpec = field(default_factory=lambda: WindowSpec(3, 3, 3))
    combine_mode: str = "intersection"
    force_self_block: bool = True
    # "mean" divides the off-diagonal sum by N*(N-1); "paper" divides by N-1
    redundancy_norm: str = "mean"

    def __post_init__(self):
        if self.lambda_ < 0 or self.beta < 0:
            raise ConfigError(f"lambda and beta must be >= 0, got {self.lambda_}, {self.beta}")
        if self.lambda_ == 0 and self.beta == 0:
            raise ConfigError("lambda and beta cannot both be 0")
        if isinstance(self.top_k, bool) or int(self.top_k) != self.top_k or self.top_k < 1:
            raise ConfigError(f"top_k must be a positive integer, got {self.top_k!r}")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigError(f"combine_mode must be one of {COMBINE_MODES}, got {self.combine_mode!r}")
        if self.redundancy_norm not in REDUNDANCY_NORMS:
            raise ConfigError(f"redundancy_norm must be one of {REDUNDANCY_NORMS}, got {self.redundancy_norm!r}")


@dataclass(frozen=True, eq=False)
class BlockScores:
    similarity: np.ndarray  # (heads, B, B)
    redundancy: np.ndarray  # (heads, B)
    importance: np.ndarray  # (heads, B, B)


@dataclass(frozen=True, eq=False)
class BlockMask:
    """Boolean block-pair mask; (B, B) for ``sta``, (heads, B, B) otherwise."""

    bits: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        bits = np.asarray(self.bits, dtype=bool)
        expected_ndim = 2 if self.kind == "sta" else 3
        if bits.ndim != expected_ndim or bits.shape[-1] != bits.shape[-2]:
            raise ValueError(f"{self.kind} mask must be square with {expected_ndim} dims, got {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def block_count(self) -> int:
        return self.bits.shape[-1]

    def per_head(self, heads: int) -> np.ndarray:
        if self.bits.ndim == 2:
            return np.broadcast_to(self.bits, (heads, *self.bits.shape))
        if self.bits.shape[0] != heads:
            raise ValueError(f"mask has {self.bits.shape[0]} heads, expected {heads}")
        return self.bits

    def row_counts(self) -> np.ndarray:
        return self.bits.sum(axis=-1)

    def set_pairs(self) -> int:
        return int(self.bits.sum())

    def triplets(self) -> np.ndarray:
        """(n, 3) array of (head, query_block, key_block) for set bits, row-major."""
        bits = self.bits[None] if self.bits.ndim == 2 else self.bits
        return np.argwhere(bits)

    def equals(self, other: "BlockMask") -> bool:
        return self.kind == other.kind and np.array_equal(self.bits, other.bits)


def pool_blocks(x: np.ndarray, tiles: TileSpec) -> np.ndarray:
    """Mean of each block's tokens. ``x`` is (heads, tokens, D) in tile-major order."""
    heads, tokens, dim = x.shape
    n = tiles.block_tokens
    if tokens % n:
        raise ValueError(f"{tokens} tokens cannot be split into blocks of {n}")
    blocks = x.reshape(heads, tokens // n, n, dim).astype(np.float64)
    return blocks.sum(axis=2) / n


def similarity_scores(q_pooled: np.ndarray, k_pooled: np.ndarray) -> np.ndarray:
    if q_pooled.shape != k_pooled.shape:
        raise ValueError(f"pooled shapes differ: {q_pooled.shape} vs {k_pooled.shape}")
    return np.einsum("hid,hjd->hij", q_pooled.astype(np.float64), k_pooled.astype(np.float64))


def redundancy_scores(k: np.ndarray, tiles: TileSpec, norm: str = "mean") -> np.ndarray:
    """Average off-diagonal Gram entry of each key block's raw tokens, shape (heads, B).

    Uses sum_{i != j} k_i.k_j = |sum_i k_i|^2 - sum_i |k_i|^2.
    """
    if norm not in REDUNDANCY_NORMS:
        raise ConfigError(f"redundancy_norm must be one of {REDUNDANCY_NORMS}, got {norm!r}")
    n = tiles.block_tokens
    if n < 2:
        raise ConfigError("redundancy is undefined for single-token blocks; set beta=0 or use larger tiles")
    heads, tokens, dim = k.shape
    blocks = k.reshape(heads, tokens // n, n, dim).astype(np.float64)
    block_sum = blocks.sum(axis=2)
    off_diagonal = (block_sum * block_sum).sum(axis=-1) - (blocks * blocks).sum(axis=(2, 3))
    return off_diagonal / (n * (n - 1) if norm == "mean" else n - 1)


def importance_scores(similarity: np.ndarray, redundancy: np.ndarray, cfg: SstaConfig) -> np.ndarray:
    return cfg.lambda_ * similarity - cfg.beta * redundancy[:, None, :]


def topk_mask(importance: np.ndarray, k: int) -> BlockMask:
    """Keep the ``min(k, B)`` best key blocks per row; ties go to the lower index."""
    if k < 1:
        raise ConfigError(f"top_k must be >= 1, got {k}")
    k = min(k, importance.shape[-1])
    order = np.argsort(-importance, axis=-1, kind="stable")[..., :k]
    bits = np.zeros(importance.shape, dtype=bool)
    np.put_along_axis(bits, order, True, axis=-1)
    return BlockMask(bits, "selective")


def _band(n: int, radius: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= radius


def sta_mask(tiles: TileSpec, grid: GridSpec, window: WindowSpec) -> BlockMask:
    block_grid = tiles.block_grid(grid)
    radii = window.clamped(block_grid).radii
    bt, bh, bw = (_band(n, r) for n, r in zip(block_grid, radii))
    # flat index is t-major, so the 3D window is the Kronecker product of 1D bands
    bits = np.kron(bt, np.kron(bh, bw)).astype(bool)
    return BlockMask(bits, "sta")


def combine_masks(sel: BlockMask, sta: BlockMask, cfg: SstaConfig) -> BlockMask:
    if sel.block_count != sta.block_count:
        raise ValueError(f"mask sizes differ: {sel.block_count} vs {sta.block_count}")
    sta_bits = sta.per_head(sel.bits.shape[0])
    if cfg.combine_mode == "intersection":
        bits = sel.bits & sta_bits
    else:
        bits = sel.bits | sta_bits
    if cfg.force_self_block:
        diag = np.arange(sel.block_count)
        bits[:, diag, diag] = True
    return BlockMask(bits, "combined")


def head_scores(q_tiled: np.ndarray, k_tiled: np.ndarray, tiles: TileSpec, cfg: SstaConfig):
    """(similarity, redundancy, importance) for one head; inputs are (tokens, D), tile-major."""
    q, k = q_tiled[None], k_tiled[None]
    similarity = similarity_scores(pool_blocks(q, tiles), pool_blocks(k, tiles))
    if cfg.beta == 0 and tiles.block_tokens == 1:
        redundancy = np.zeros(similarity.shape[:2])
    else:
        redundancy = redundancy_scores(k, tiles, cfg.redundancy_norm)
    importance = importance_scores(similarity, redundancy, cfg)
    return similarity[0], redundancy[0], importance[0]


def block_scores(q_tiled: np.ndarray, k_tiled: np.ndarray, tiles: TileSpec, cfg: SstaConfig) -> BlockScores:
    """Pool, score similarity and redundancy, combine into importance, head by head."""
    parts = [head_scores(qh, kh, tiles, cfg) for qh, kh in zip(q_tiled, k_tiled)]
    return BlockScores(*(np.stack(x) for x in zip(*parts)))


# -- export ----------------------------------------------------------------------


def write_mask_csv(path, mask: BlockMask) -> int:
    """Write set bits as ``head,query_block,key_block`` rows; return the row count.

    Head-independent ``sta`` masks are written once with head 0.
    """
    rows = mask.triplets()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["head", "query_block", "key_block"])
        writer.writerows(rows.tolist())
    return len(rows)


def read_mask_csv(path, heads: int, blocks: int) -> np.ndarray:
    bits = np.zeros((heads, blocks, blocks), dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for h, i, j in reader:
            bits[int(h), int(i), int(j)] = True
    return bits


def write_pgm(path, bits: np.ndarray) -> None:
    """Binary PGM (P5) heatmap, one pixel per block pair, set bits white."""
    bits = np.asarray(bits, dtype=bool)
    rows, cols = bits.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write((bits.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols) == 255


def export_masks(out_dir, sel: BlockMask, sta: BlockMask, combined: BlockMask) -> dict[str, int]:
    """Write CSVs and per-head PGMs of all three masks into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, mask in (("sel", sel), ("sta", sta), ("combined", combined)):
        counts[name] = write_mask_csv(out / f"mask_{name}.csv", mask)
        if mask.bits.ndim == 2:
            write_pgm(out / f"mask_{name}.pgm", mask.bits)
        else:
            for h, head_bits in enumerate(mask.bits):
                write_pgm(out / f"mask_{name}_h{h}.pgm", head_bits)
    return counts
