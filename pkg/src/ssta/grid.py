"""Spatiotemporal grid geometry, tile-major token ordering and fixtures.

Tokens are stored canonically in token-major order (frame outer, then row,
then column). Block-sparse work happens in tile-major order, where the N
tokens of each block occupy one contiguous run. :func:`tile_permutation`
maps between the two.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

AXES = ("t", "h", "w")
TENSOR_TAGS = {"q": 0, "k": 1, "v": 2}


class ConfigError(ValueError):
    """Invalid geometry or engine configuration."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class FixtureFormatError(OSError):
    """Malformed fixture file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _positive(name: str, value: int) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class GridSpec:
    heads: int
    frames: int
    height: int
    width: int
    head_dim: int

    def __post_init__(self):
        for name in ("heads", "frames", "height", "width", "head_dim"):
            object.__setattr__(self, name, _positive(name, getattr(self, name)))

    @property
    def thw(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    @property
    def token_count(self) -> int:
        return self.frames * self.height * self.width

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        return (self.heads, self.frames, self.height, self.width, self.head_dim)

    @property
    def numel(self) -> int:
        return self.heads * self.token_count * self.head_dim


@dataclass(frozen=True)
class TileSpec:
    tile_t: int
    tile_h: int
    tile_w: int

    def __post_init__(self):
        for name in ("tile_t", "tile_h", "tile_w"):
            object.__setattr__(self, name, _positive(name, getattr(self, name)))

    @property
    def thw(self) -> tuple[int, int, int]:
        return (self.tile_t, self.tile_h, self.tile_w)

    @property
    def block_tokens(self) -> int:
        return self.tile_t * self.tile_h * self.tile_w

    def check(self, grid: GridSpec) -> None:
        """Raise :class:`ConfigError` unless every tile extent divides the grid."""
        for axis, extent, tile in zip(AXES, grid.thw, self.thw):
            if extent % tile:
                raise ConfigError(
                    f"tile size {tile} does not divide grid extent {extent} on axis {axis}",
                    axis=axis,
                )

    def block_grid(self, grid: GridSpec) -> tuple[int, int, int]:
        self.check(grid)
        return tuple(extent // tile for extent, tile in zip(grid.thw, self.thw))

    def block_count(self, grid: GridSpec) -> int:
        nt, nh, nw = self.block_grid(grid)
        return nt * nh * nw


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-tile window extents, in blocks. Components must be odd."""

    w_t: int
    w_h: int
    w_w: int

    def __post_init__(self):
        for axis, name in zip(AXES, ("w_t", "w_h", "w_w")):
            value = _positive(name, getattr(self, name))
            if value % 2 == 0:
                raise ConfigError(f"window extent {name}={value} must be odd", axis=axis)
            object.__setattr__(self, name, value)

    @property
    def thw(self) -> tuple[int, int, int]:
        return (self.w_t, self.w_h, self.w_w)

    @property
    def radii(self) -> tuple[int, int, int]:
        return tuple((w - 1) // 2 for w in self.thw)

    def clamped(self, block_grid: tuple[int, int, int]) -> "WindowSpec":
        """Clamp each extent to ``2 * n - 1``, which already covers the full axis."""
        return WindowSpec(*(min(w, 2 * n - 1) for w, n in zip(self.thw, block_grid)))

    @classmethod
    def full(cls, block_grid: tuple[int, int, int]) -> "WindowSpec":
        return cls(*(2 * n - 1 for n in block_grid))


@dataclass(frozen=True)
class BlockCoord:
    bt: int
    bh: int
    bw: int
    flat: int

    @classmethod
    def from_flat(cls, flat: int, block_grid: tuple[int, int, int]) -> "BlockCoord":
        _, nh, nw = block_grid
        return cls(flat // (nh * nw), (flat // nw) % nh, flat % nw, flat)

    @classmethod
    def from_coords(cls, bt: int, bh: int, bw: int, block_grid: tuple[int, int, int]) -> "BlockCoord":
        _, nh, nw = block_grid
        return cls(bt, bh, bw, bt * nh * nw + bh * nw + bw)


def block_coords(block_grid: tuple[int, int, int]) -> np.ndarray:
    """(B, 3) integer array of (bt, bh, bw) for every flat block index."""
    nt, nh, nw = block_grid
    bt, bh, bw = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw), indexing="ij")
    return np.stack([bt.ravel(), bh.ravel(), bw.ravel()], axis=1)


@dataclass(frozen=True)
class Permutation:
    """Canonical <-> tile-major token reordering.

    ``forward[c]`` is the tile-major position of canonical token ``c``;
    ``inverse[p]`` is the canonical token stored at tile-major position ``p``.
    """

    forward: np.ndarray
    inverse: np.ndarray
    block_tokens: int

    def to_tiles(self, x: np.ndarray) -> np.ndarray:
        """Reorder the token axis (second to last) of ``x`` into tile-major order."""
        return np.take(x, self.inverse, axis=-2)

    def from_tiles(self, x: np.ndarray) -> np.ndarray:
        return np.take(x, self.forward, axis=-2)


def tile_permutation(grid: GridSpec, tiles: TileSpec) -> Permutation:
    nt, nh, nw = tiles.block_grid(grid)
    tt, th, tw = tiles.thw
    canonical = np.arange(grid.token_count).reshape(nt, tt, nh, th, nw, tw)
    # (block t, h, w, then in-block t, h, w): ascending canonical order inside every block
    inverse = canonical.transpose(0, 2, 4, 1, 3, 5).reshape(-1)
    forward = np.empty_like(inverse)
    forward[inverse] = np.arange(inverse.size)
    return Permutation(forward=forward, inverse=inverse, block_tokens=tiles.block_tokens)


def nearest_valid_grid(grid: GridSpec, tiles: TileSpec) -> GridSpec:
    """Round every axis to the nearest positive multiple of its tile (ties round up)."""
    dims = []
    for extent, tile in zip(grid.thw, tiles.thw):
        lower = (extent // tile) * tile
        upper = lower if lower == extent else lower + tile
        dims.append(upper if lower == 0 or upper - extent <= extent - lower else lower)
    return GridSpec(grid.heads, *dims, grid.head_dim)


@dataclass(frozen=True, eq=False)
class AttentionInputs:
    """Q, K, V as float32 arrays shaped (heads, F, H, W, head_dim)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.q)
        for name in ("q", "k", "v"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.ndim != 5:
                raise ConfigError(f"{name} must have 5 dims (h, F, H, W, D), got shape {arr.shape}")
            if arr.shape != shape:
                raise ConfigError(f"{name} shape {arr.shape} differs from q shape {shape}")
            if not np.isfinite(arr).all():
                raise ConfigError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        GridSpec(*shape)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(*self.q.shape)

    def tokens(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views shaped (heads, tokens, head_dim) in canonical order."""
        h, f, hh, w, d = self.q.shape
        return tuple(x.reshape(h, f * hh * w, d) for x in (self.q, self.k, self.v))

    def identical(self, other: "AttentionInputs") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors()))

    def tensors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.q, self.k, self.v)


# -- deterministic fixtures ---------------------------------------------------
#
# Philox4x64-10 keyed directly by the seed. Each (tensor, head) slab owns the
# counter range starting at word 2 = slab index, so slabs can be generated
# independently. Raw 64-bit words become uniforms with 53 significant bits,
# then Box-Muller; only the raw Philox stream comes from numpy, so values do not
# depend on numpy's distribution samplers.

DISTRIBUTIONS = ("standard-normal", "unit-sphere")
_TWO_POW_M53 = 2.0**-53


def _philox_normals(seed: int, slab: int, count: int) -> np.ndarray:
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must fit in 64 unsigned bits, got {seed}")
    bitgen = np.random.Philox(key=seed, counter=[0, 0, slab, 0])
    pairs = (count + 1) // 2
    raw = bitgen.random_raw(2 * pairs).astype(np.uint64)
    uniform = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_POW_M53
    u1, u2 = uniform[0::2], uniform[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:count]


def fixture_slab(grid: GridSpec, seed: int, distribution: str, tensor: str, head: int) -> np.ndarray:
    """One head of one fixture tensor, shaped (tokens, head_dim), float32."""
    if distribution not in DISTRIBUTIONS:
        raise ConfigError(f"unknown distribution {distribution!r}; expected one of {DISTRIBUTIONS}")
    slab = TENSOR_TAGS[tensor] * grid.heads + head
    values = _philox_normals(seed, slab, grid.token_count * grid.head_dim).reshape(grid.token_count, grid.head_dim)
    if distribution == "unit-sphere":
        values /= np.linalg.norm(values, axis=-1, keepdims=True)
    return values.astype(np.float32)


def generate_fixture(grid: GridSpec, seed: int, distribution: str = "standard-normal") -> AttentionInputs:
    tensors = []
    for name in ("q", "k", "v"):
        heads = [fixture_slab(grid, seed, distribution, name, h) for h in range(grid.heads)]
        tensors.append(np.stack(heads).reshape(grid.shape))
    return AttentionInputs(*tensors)


# -- fixture files --------------------------------------------------------------

MAGIC = b"SSTA"
VERSION = 1
_HEADER = struct.Struct("<4sII5I")
_MAX_ELEMENTS = 2**40


def write_tensor(fh: BinaryIO, tag: int, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f4")
    if array.ndim != 5:
        raise ConfigError(f"fixture tensors must be 5-dimensional, got shape {array.shape}")
    fh.write(_HEADER.pack(MAGIC, VERSION, tag, *array.shape))
    fh.write(np.ascontiguousarray(array).tobytes())


def read_tensor(buf: bytes, offset: int = 0) -> tuple[int, np.ndarray, int]:
    """Parse one tensor record at ``offset``; return (tag, array, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise FixtureFormatError("truncated header", offset)
    magic, version, tag, *dims = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FixtureFormatError(f"bad magic {magic!r}", offset)
    if version != VERSION:
        raise FixtureFormatError(f"unsupported version {version}", offset + 4)
    if tag not in TENSOR_TAGS.values():
        raise FixtureFormatError(f"unknown tensor tag {tag}", offset + 8)
    count = 1
    for i, dim in enumerate(dims):
        if dim == 0:
            raise FixtureFormatError(f"zero dimension at index {i}", offset + 12 + 4 * i)
        count *= dim
        if count > _MAX_ELEMENTS:
            raise FixtureFormatError(f"dimension overflow: dims {tuple(dims)}", offset + 12 + 4 * i)
    start = offset + _HEADER.size
    end = start + 4 * count
    if end > len(buf):
        raise FixtureFormatError(
            f"truncated payload: header implies {4 * count} bytes, {len(buf) - start} present", len(buf)
        )
    array = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims)
    return tag, array.astype(np.float32), end


def write_fixture(path, inputs: AttentionInputs) -> None:
    """Write Q, K, V as three consecutive tensor records."""
    with open(path, "wb") as fh:
        for tag, array in enumerate(inputs.tensors()):
            write_tensor(fh, tag, array)


def read_fixture(path) -> AttentionInputs:
    buf = Path(path).read_bytes()
    offset = 0
    tensors: dict[int, np.ndarray] = {}
    for expected in range(3):
        record_start = offset
        tag, array, offset = read_tensor(buf, offset)
        if tag != expected:
            raise FixtureFormatError(f"expected tensor tag {expected}, found {tag}", record_start + 8)
        if tensors and array.shape != tensors[0].shape:
            raise FixtureFormatError(
                f"tensor {tag} shape {array.shape} disagrees with Q shape {tensors[0].shape}",
                record_start + 12,
            )
        tensors[tag] = array
    if offset != len(buf):
        raise FixtureFormatError(f"{len(buf) - offset} trailing bytes", offset)
    return AttentionInputs(tensors[0], tensors[1], tensors[2])


def iter_block_tokens(grid: GridSpec, tiles: TileSpec, flat: int) -> Iterator[tuple[int, int, int]]:
    """Canonical (t, y, x) coordinates of the tokens in block ``flat``, ascending."""
    coord = BlockCoord.from_flat(flat, tiles.block_grid(grid))
    tt, th, tw = tiles.thw
    for lt in range(tt):
        for lh in range(th):
            for lw in range(tw):
                yield (coord.bt * tt + lt, coord.bh * th + lh, coord.bw * tw + lw)
