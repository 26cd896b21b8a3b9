"""Dense, masked-oracle and block-sparse softmax attention.

Tensors are stored as float32 and every product and reduction is done in
float64. Logits carry the usual ``1/sqrt(D)`` scale.
"""

from __future__ import annotations

import contextlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .grid import AttentionInputs, ConfigError, GridSpec, TileSpec, fixture_slab, tile_permutation
from .masking import (
    BlockMask,
    BlockScores,
    SstaConfig,
    block_scores,
    combine_masks,
    head_scores,
    sta_mask,
    topk_mask,
)

DENSE_QUERY_CHUNK = 512
KV_CHUNK_BLOCKS = 32


class EmptyRowError(ValueError):
    pass


@dataclass
class KernelStats:
    """Work done by the block-sparse kernel. MACs are multiply-accumulates."""

    block_pairs: int = 0
    score_macs: int = 0
    output_macs: int = 0
    exp_count: int = 0

    @property
    def total_macs(self) -> int:
        return self.score_macs + self.output_macs

    def __iadd__(self, other: "KernelStats") -> "KernelStats":
        self.block_pairs += other.block_pairs
        self.score_macs += other.score_macs
        self.output_macs += other.output_macs
        self.exp_count += other.exp_count
        return self


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    o: np.ndarray  # (heads, F, H, W, D), canonical order, float32
    stats: KernelStats | None = field(default=None)


def resolve_threads(threads: int) -> int:
    if threads < 0:
        raise ConfigError(f"threads must be >= 0, got {threads}")
    return threads or os.cpu_count() or 1


@contextlib.contextmanager
def blas_threads(threads: int):
    """Pin BLAS to ``threads`` workers (1 gives bitwise-reproducible products)."""
    with threadpool_limits(limits=resolve_threads(threads), user_api="blas"):
        yield


def _empty_rows(bits: np.ndarray) -> np.ndarray:
    return np.argwhere(~bits.any(axis=-1))


def _check_mask(mask: BlockMask, grid: GridSpec, tiles: TileSpec) -> np.ndarray:
    blocks = tiles.block_count(grid)
    if mask.block_count != blocks:
        raise ConfigError(f"mask covers {mask.block_count} blocks but tiles/grid give {blocks}")
    bits = mask.per_head(grid.heads)
    empty = _empty_rows(bits)
    if len(empty):
        h, b = empty[0]
        raise EmptyRowError(f"empty attention row at (head {h}, block {b})")
    return bits


def dense_attention(inputs: AttentionInputs, threads: int = 1) -> AttentionOutput:
    grid = inputs.grid
    q, k, v = inputs.tokens()
    scale = 1.0 / math.sqrt(grid.head_dim)
    out = np.empty(q.shape, dtype=np.float32)
    with blas_threads(threads):
        for h in range(grid.heads):
            kh = k[h].astype(np.float64)
            vh = v[h].astype(np.float64)
            for start in range(0, grid.token_count, DENSE_QUERY_CHUNK):
                qc = q[h, start : start + DENSE_QUERY_CHUNK].astype(np.float64)
                logits = (qc @ kh.T) * scale
                logits -= logits.max(axis=1, keepdims=True)
                np.exp(logits, out=logits)
                denom = logits.sum(axis=1, keepdims=True)
                out[h, start : start + DENSE_QUERY_CHUNK] = (logits @ vh) / denom
    return AttentionOutput(out.reshape(grid.shape))


def token_block_ids(grid: GridSpec, tiles: TileSpec) -> np.ndarray:
    """Flat block index of every canonical token."""
    nt, nh, nw = tiles.block_grid(grid)
    t, y, x = np.meshgrid(
        np.arange(grid.frames) // tiles.tile_t,
        np.arange(grid.height) // tiles.tile_h,
        np.arange(grid.width) // tiles.tile_w,
        indexing="ij",
    )
    return (t * nh * nw + y * nw + x).ravel()


def masked_oracle_attention(inputs: AttentionInputs, mask: BlockMask, tiles: TileSpec) -> AttentionOutput:
    """Reference for the sparse kernel: token-level mask, canonical order, two-pass softmax."""
    grid = inputs.grid
    bits = _check_mask(mask, grid, tiles)
    q, k, v = inputs.tokens()
    blk = token_block_ids(grid, tiles)
    scale = 1.0 / math.sqrt(grid.head_dim)
    out = np.empty(q.shape, dtype=np.float32)
    with blas_threads(1):
        for h in range(grid.heads):
            kh = k[h].astype(np.float64)
            vh = v[h].astype(np.float64)
            for start in range(0, grid.token_count, DENSE_QUERY_CHUNK):
                rows = slice(start, start + DENSE_QUERY_CHUNK)
                allowed = bits[h][blk[rows, None], blk[None, :]]
                logits = (q[h, rows].astype(np.float64) @ kh.T) * scale
                row_max = np.where(allowed, logits, -np.inf).max(axis=1, keepdims=True)
                weights = np.where(allowed, np.exp(logits - row_max), 0.0)
                out[h, rows] = (weights @ vh) / weights.sum(axis=1, keepdims=True)
    return AttentionOutput(out.reshape(grid.shape))


def _select(blocks: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # contiguous runs of blocks are contiguous in tile-major memory; avoid the copy
    if idx[-1] - idx[0] + 1 == len(idx):
        return blocks[idx[0] : idx[-1] + 1]
    return blocks[idx]


def _sparse_rows(qb, kb, vb, bits, rows, out, scale, kv_chunk) -> KernelStats:
    """Online-softmax attention for the (head, query block) pairs in ``rows``."""
    _, _, n, d = qb.shape
    stats = KernelStats()
    for h, i in rows:
        q = qb[h, i]
        allowed = np.flatnonzero(bits[h, i])
        running_max = np.full(n, -np.inf)
        denom = np.zeros(n)
        acc = np.zeros((n, d))
        for start in range(0, len(allowed), kv_chunk):
            idx = allowed[start : start + kv_chunk]
            keys = _select(kb[h], idx).reshape(-1, d)
            values = _select(vb[h], idx).reshape(-1, d)
            logits = (q @ keys.T) * scale
            new_max = np.maximum(running_max, logits.max(axis=1))
            rescale = np.exp(running_max - new_max)
            logits -= new_max[:, None]
            np.exp(logits, out=logits)
            denom = denom * rescale + logits.sum(axis=1)
            acc = acc * rescale[:, None] + logits @ values
            running_max = new_max
            stats.block_pairs += len(idx)
            stats.score_macs += len(idx) * n * n * d
            stats.output_macs += len(idx) * n * n * d
            stats.exp_count += logits.size + n
        out[h, i] = acc / denom[:, None]
    return stats


def block_sparse_attention(
    inputs: AttentionInputs,
    mask: BlockMask,
    tiles: TileSpec,
    threads: int = 1,
    kv_chunk_blocks: int = KV_CHUNK_BLOCKS,
) -> AttentionOutput:
    """Attention restricted to the set block pairs of ``mask``; skipped pairs cost nothing.

    ``threads=1`` runs every row in order and is bitwise reproducible; more
    threads split the rows into disjoint stripes.
    """
    grid = inputs.grid
    bits = _check_mask(mask, grid, tiles)
    if kv_chunk_blocks < 1:
        raise ConfigError(f"kv_chunk_blocks must be >= 1, got {kv_chunk_blocks}")
    perm = tile_permutation(grid, tiles)
    n, d = tiles.block_tokens, grid.head_dim
    blocks = tiles.block_count(grid)
    q, k, v = (perm.to_tiles(x).astype(np.float64).reshape(grid.heads, blocks, n, d) for x in inputs.tokens())
    out = np.empty((grid.heads, blocks, n, d))
    scale = 1.0 / math.sqrt(d)
    rows = [(h, i) for h in range(grid.heads) for i in range(blocks)]
    workers = resolve_threads(threads)

    stats = KernelStats()
    if workers == 1:
        with blas_threads(1):
            stats = _sparse_rows(q, k, v, bits, rows, out, scale, kv_chunk_blocks)
    else:
        stripes = [rows[w::workers] for w in range(workers)]
        with blas_threads(1), ThreadPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(lambda s: _sparse_rows(q, k, v, bits, s, out, scale, kv_chunk_blocks), stripes):
                stats += part

    o = perm.from_tiles(out.reshape(grid.heads, grid.token_count, d)).astype(np.float32)
    return AttentionOutput(o.reshape(grid.shape), stats)


def _masks_from_scores(scores: BlockScores, grid: GridSpec, tiles: TileSpec, cfg: SstaConfig):
    sel = topk_mask(scores.importance, cfg.top_k)
    sta = sta_mask(tiles, grid, cfg.window)
    return sel, sta, combine_masks(sel, sta, cfg), scores


def ssta_masks(inputs: AttentionInputs, tiles: TileSpec, cfg: SstaConfig):
    """(selective, sta, combined, scores) for ``inputs`` under ``cfg``."""
    grid = inputs.grid
    perm = tile_permutation(grid, tiles)
    q, k, _ = inputs.tokens()
    scores = block_scores(perm.to_tiles(q), perm.to_tiles(k), tiles, cfg)
    return _masks_from_scores(scores, grid, tiles, cfg)


def ssta_masks_from_seed(grid: GridSpec, tiles: TileSpec, cfg: SstaConfig, seed: int, distribution: str):
    """Same result as ``ssta_masks(generate_fixture(grid, seed, distribution), ...)``.

    Generates Q and K one head at a time, so shapes too large to hold in
    memory can still be scored.
    """
    perm = tile_permutation(grid, tiles)
    parts = []
    for h in range(grid.heads):
        q = perm.to_tiles(fixture_slab(grid, seed, distribution, "q", h))
        k = perm.to_tiles(fixture_slab(grid, seed, distribution, "k", h))
        parts.append(head_scores(q, k, tiles, cfg))
    scores = BlockScores(*(np.stack(x) for x in zip(*parts)))
    return _masks_from_scores(scores, grid, tiles, cfg)


def ssta_attention(
    inputs: AttentionInputs, tiles: TileSpec, cfg: SstaConfig, threads: int = 1
) -> tuple[AttentionOutput, BlockMask, BlockScores]:
    _, _, combined, scores = ssta_masks(inputs, tiles, cfg)
    return block_sparse_attention(inputs, combined, tiles, threads=threads), combined, scores
