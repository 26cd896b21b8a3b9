"""Selective and sliding tile attention (SSTA) on 3D token grids."""

__version__ = "0.1.0"

from .attention import (  # noqa: E402
    AttentionOutput,
    block_sparse_attention,
    dense_attention,
    masked_oracle_attention,
    ssta_attention,
    ssta_masks,
)
from .grid import (  # noqa: E402
    AttentionInputs,
    ConfigError,
    GridSpec,
    TileSpec,
    WindowSpec,
    generate_fixture,
    read_fixture,
    tile_permutation,
    write_fixture,
)
from .masking import BlockMask, BlockScores, SstaConfig, combine_masks, sta_mask, topk_mask  # noqa: E402
from .metrics import compare, density  # noqa: E402

__all__ = [
    "AttentionInputs",
    "AttentionOutput",
    "BlockMask",
    "BlockScores",
    "ConfigError",
    "GridSpec",
    "SstaConfig",
    "TileSpec",
    "WindowSpec",
    "block_sparse_attention",
    "combine_masks",
    "compare",
    "dense_attention",
    "density",
    "generate_fixture",
    "masked_oracle_attention",
    "read_fixture",
    "ssta_attention",
    "ssta_masks",
    "sta_mask",
    "tile_permutation",
    "topk_mask",
    "write_fixture",
]
