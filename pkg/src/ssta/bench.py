"""Shape presets, benchmark configs and reports, and the verify/bench/mask/flops commands."""

from __future__ import annotations

import datetime as _dt
import itertools
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import psutil

from . import __version__
from .attention import (
    EmptyRowError,
    block_sparse_attention,
    dense_attention,
    masked_oracle_attention,
    ssta_attention,
    ssta_masks,
    ssta_masks_from_seed,
)
from .grid import (
    AttentionInputs,
    ConfigError,
    GridSpec,
    TileSpec,
    WindowSpec,
    block_coords,
    generate_fixture,
    nearest_valid_grid,
    read_fixture,
)
from .masking import BlockMask, SstaConfig, export_masks, write_mask_csv
from .metrics import compare, density

SCHEMA_VERSION = 1
RUN_MODES = ("dense", "sparse", "both")
ORACLE_TOL = 1e-5


# -- presets ----------------------------------------------------------------------
#
# Latent grids follow the VAE ratios: 16x spatial, 4x temporal with a causal
# first frame, so F frames give (F - 1) // 4 + 1 latent frames.

VAE_SPATIAL = 16
VAE_TEMPORAL = 4


def latent_grid(height_px: int, width_px: int, frames: int) -> tuple[int, int, int]:
    return ((frames - 1) // VAE_TEMPORAL + 1, height_px // VAE_SPATIAL, width_px // VAE_SPATIAL)


PAPER_TIMINGS = {
    # seconds per diffusion step on the full pipeline, no engineering acceleration
    "720p-241f": {"dense_s_per_step": 5.5070, "sparse_s_per_step": 2.9475, "end_to_end_speedup": 1.87},
    "720p-121f": {"dense_s_per_step": 2.0084, "sparse_s_per_step": 1.5638},
    "480p-241f": {"dense_s_per_step": 1.7015},
    "480p-121f": {"dense_s_per_step": 0.9064},
}


@dataclass(frozen=True)
class Preset:
    name: str
    grid: GridSpec
    tiles: TileSpec
    window: WindowSpec
    top_k: int
    latent: tuple[int, int, int]
    note: str
    reference: str | None = None

    def paper_reference(self) -> dict | None:
        if self.reference is None:
            return None
        return {"preset": self.reference, **PAPER_TIMINGS[self.reference], "flag": "paper-measured, not asserted"}


def _paper_preset(name: str, px: tuple[int, int], frames: int) -> Preset:
    latent = latent_grid(*px, frames)
    tiles = TileSpec(4, 8, 8)
    grid = nearest_valid_grid(GridSpec(16, *latent, 128), tiles)
    note = f"latent grid {latent} rounded to {grid.thw} for tiles {tiles.thw}"
    return Preset(name, grid, tiles, WindowSpec(3, 3, 3), 16, latent, note, reference=name)


def _scaled_preset(name: str, base: Preset, thw: tuple[int, int, int]) -> Preset:
    note = f"{base.name} latent grid {base.latent} divided down to {thw}; 1 head, head_dim 64"
    return Preset(name, GridSpec(1, *thw, 64), TileSpec(2, 4, 8), WindowSpec(3, 3, 3), 32, base.latent, note, base.name)


def _build_presets() -> dict[str, Preset]:
    full = {
        "720p-241f": _paper_preset("720p-241f", (720, 1280), 241),
        "720p-121f": _paper_preset("720p-121f", (720, 1280), 121),
        "480p-241f": _paper_preset("480p-241f", (480, 848), 241),
        "480p-121f": _paper_preset("480p-121f", (480, 848), 121),
    }
    scaled = {
        "720p-241f-scaled": _scaled_preset("720p-241f-scaled", full["720p-241f"], (16, 24, 40)),
        "720p-121f-scaled": _scaled_preset("720p-121f-scaled", full["720p-121f"], (8, 24, 40)),
    }
    desk = {
        "desk": Preset(
            "desk", GridSpec(2, 8, 16, 16, 32), TileSpec(2, 4, 4), WindowSpec(3, 3, 3), 8, (8, 16, 16), "verify default"
        )
    }
    return {**full, **scaled, **desk}


PRESETS = _build_presets()


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    grid: GridSpec = field(default_factory=lambda: PRESETS["desk"].grid)
    tiles: TileSpec = field(default_factory=lambda: PRESETS["desk"].tiles)
    ssta: SstaConfig = field(default_factory=SstaConfig)
    seed: int = 0
    repeats: int = 5
    warmup: int = 1
    threads: int = 1
    mode: str = "both"
    distribution: str = "standard-normal"
    preset: str | None = None
    fixture: str | None = None

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if self.threads < 0:
            raise ConfigError(f"threads must be >= 0, got {self.threads}")
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        self.tiles.check(self.grid)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "BenchConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[name]
        ssta = SstaConfig(top_k=p.top_k, window=p.window)
        return cls(grid=p.grid, tiles=p.tiles, ssta=ssta, preset=name, **overrides)

    @property
    def block_count(self) -> int:
        return self.tiles.block_count(self.grid)

    def to_dict(self) -> dict:
        cfg = self.ssta
        return {
            "grid": asdict(self.grid),
            "tiles": list(self.tiles.thw),
            "window": list(cfg.window.thw),
            "top_k": cfg.top_k,
            "lambda": cfg.lambda_,
            "beta": cfg.beta,
            "combine_mode": cfg.combine_mode,
            "force_self_block": cfg.force_self_block,
            "redundancy_norm": cfg.redundancy_norm,
            "seed": self.seed,
            "repeats": self.repeats,
            "warmup": self.warmup,
            "threads": self.threads,
            "mode": self.mode,
            "distribution": self.distribution,
            "preset": self.preset,
            "fixture": self.fixture,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        ssta = SstaConfig(
            lambda_=d["lambda"],
            beta=d["beta"],
            top_k=d["top_k"],
            window=WindowSpec(*d["window"]),
            combine_mode=d["combine_mode"],
            force_self_block=d["force_self_block"],
            redundancy_norm=d["redundancy_norm"],
        )
        return cls(
            grid=GridSpec(**d["grid"]),
            tiles=TileSpec(*d["tiles"]),
            ssta=ssta,
            seed=d["seed"],
            repeats=d["repeats"],
            warmup=d["warmup"],
            threads=d["threads"],
            mode=d["mode"],
            distribution=d["distribution"],
            preset=d["preset"],
            fixture=d["fixture"],
        )


def estimate_memory(grid: GridSpec, tiles: TileSpec) -> int:
    """Rough peak bytes for one attention call (fp32 inputs, fp64 working copies)."""
    numel = grid.numel
    inputs = 3 * 4 * numel
    working = 4 * 8 * numel
    chunk = 3 * 8 * min(512, grid.token_count) * grid.token_count
    masks = 3 * grid.heads * tiles.block_count(grid) ** 2 * 8
    return inputs + working + chunk + masks


def check_memory(grid: GridSpec, tiles: TileSpec) -> None:
    need = estimate_memory(grid, tiles)
    available = psutil.virtual_memory().available
    if need > available:
        raise ConfigError(
            f"shape {grid.shape} needs an estimated {need / 2**30:.1f} GiB, "
            f"only {available / 2**30:.1f} GiB available"
        )


def load_inputs(config: BenchConfig) -> AttentionInputs:
    if config.fixture:
        inputs = read_fixture(config.fixture)
        if inputs.grid != config.grid:
            raise ConfigError(f"fixture grid {inputs.grid} differs from configured grid {config.grid}")
        return inputs
    check_memory(config.grid, config.tiles)
    return generate_fixture(config.grid, config.seed, config.distribution)


# -- reports ------------------------------------------------------------------------


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def median_mad(samples: list[float]) -> dict[str, float]:
    med = statistics.median(samples)
    return {"median": med, "mad": statistics.median(abs(s - med) for s in samples)}


@dataclass
class BenchReport:
    config: dict
    times: dict[str, list[float]]
    summary: dict[str, dict[str, float]]
    density: dict
    kernel: dict | None = None
    error: dict | None = None
    paper_reference: dict | None = None
    engine_version: str = __version__
    timestamp: str = field(default_factory=_timestamp)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "engine_version": self.engine_version,
            "timestamp": self.timestamp,
            "config": self.config,
            "times": self.times,
            "summary": self.summary,
            "density": self.density,
        }
        for key in ("kernel", "error", "paper_reference"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        return cls(**d)


_COUNT = {"type": "integer", "minimum": 0}
_TIMES = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1}
_SUMMARY = {
    "type": "object",
    "required": ["median", "mad"],
    "properties": {"median": {"type": "number", "exclusiveMinimum": 0}, "mad": {"type": "number", "minimum": 0}},
}

DENSITY_SCHEMA = {
    "type": "object",
    "required": [
        "set_pairs",
        "total_pairs",
        "density",
        "sparse_macs",
        "dense_macs",
        "mask_overhead_macs",
        "theoretical_speedup",
    ],
    "properties": {
        "set_pairs": _COUNT,
        "total_pairs": _COUNT,
        "density": {"type": "number", "minimum": 0, "maximum": 1},
        "sparse_macs": _COUNT,
        "dense_macs": _COUNT,
        "mask_overhead_macs": _COUNT,
        "theoretical_speedup": {"type": "number", "exclusiveMinimum": 0},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["grid", "tiles", "window", "top_k", "lambda", "beta", "combine_mode", "seed", "mode"],
    "properties": {
        "grid": {
            "type": "object",
            "required": ["heads", "frames", "height", "width", "head_dim"],
            "additionalProperties": {"type": "integer", "minimum": 1},
        },
        "tiles": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "window": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "top_k": {"type": "integer", "minimum": 1},
        "lambda": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "combine_mode": {"enum": ["intersection", "union"]},
        "redundancy_norm": {"enum": ["mean", "paper"]},
        "seed": {"type": "integer", "minimum": 0},
        "mode": {"enum": list(RUN_MODES)},
    },
}

PAPER_REFERENCE_SCHEMA = {
    "type": "object",
    "required": ["preset", "flag"],
    "properties": {"flag": {"const": "paper-measured, not asserted"}, "preset": {"type": "string"}},
    "additionalProperties": {"type": ["number", "string"]},
}

BENCH_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ssta bench report",
    "type": "object",
    "required": ["schema_version", "engine_version", "timestamp", "config", "times", "summary", "density"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "engine_version": {"type": "string"},
        "timestamp": {"type": "string"},
        "config": CONFIG_SCHEMA,
        "times": {"type": "object", "propertyNames": {"enum": ["dense", "sparse"]}, "additionalProperties": _TIMES},
        "summary": {"type": "object", "propertyNames": {"enum": ["dense", "sparse"]}, "additionalProperties": _SUMMARY},
        "density": DENSITY_SCHEMA,
        "kernel": {
            "type": "object",
            "required": ["block_pairs", "score_macs", "output_macs", "exp_count"],
            "additionalProperties": _COUNT,
        },
        "error": {
            "type": "object",
            "required": ["max_abs", "mean_abs", "relative_l2"],
            "additionalProperties": {"type": "number", "minimum": 0},
        },
        "paper_reference": PAPER_REFERENCE_SCHEMA,
    },
    # error fields exist exactly when both modes ran
    "if": {"properties": {"config": {"properties": {"mode": {"const": "both"}}}}},
    "then": {"required": ["error"]},
    "else": {"not": {"required": ["error"]}},
}

FLOPS_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ssta flops report",
    "type": "object",
    "required": ["schema_version", "engine_version", "config", "block_count", "block_tokens", "density"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "engine_version": {"type": "string"},
        "config": CONFIG_SCHEMA,
        "block_count": {"type": "integer", "minimum": 1},
        "block_tokens": {"type": "integer", "minimum": 1},
        "density": DENSITY_SCHEMA,
        "selective_density": {"type": "number", "minimum": 0, "maximum": 1},
        "sta_density": {"type": "number", "minimum": 0, "maximum": 1},
        "preset_note": {"type": "string"},
        "paper_reference": PAPER_REFERENCE_SCHEMA,
    },
}


def _paper_reference(config: BenchConfig) -> dict | None:
    return PRESETS[config.preset].paper_reference() if config.preset else None


def timed(fn: Callable, repeats: int, warmup: int):
    for _ in range(warmup):
        fn()
    samples, result = [], None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        # perf_counter can tick coarsely on some platforms; keep samples strictly positive
        samples.append(max(time.perf_counter() - start, 1e-9))
    return samples, result


def cmd_bench(config: BenchConfig) -> BenchReport:
    inputs = load_inputs(config)
    _, _, mask, _ = ssta_masks(inputs, config.tiles, config.ssta)
    times, summary = {}, {}
    dense_out = sparse_out = None
    if config.mode in ("dense", "both"):
        times["dense"], dense_out = timed(lambda: dense_attention(inputs, config.threads), config.repeats, config.warmup)
    if config.mode in ("sparse", "both"):
        times["sparse"], sparse_out = timed(
            lambda: block_sparse_attention(inputs, mask, config.tiles, threads=config.threads),
            config.repeats,
            config.warmup,
        )
    for name, samples in times.items():
        summary[name] = median_mad(samples)
    return BenchReport(
        config=config.to_dict(),
        times=times,
        summary=summary,
        density=density(mask, config.grid, config.tiles, with_redundancy=config.ssta.beta > 0).to_dict(),
        kernel=asdict(sparse_out.stats) if sparse_out is not None else None,
        error=compare(sparse_out, dense_out).to_dict() if config.mode == "both" else None,
        paper_reference=_paper_reference(config),
    )


def _masks_for(config: BenchConfig):
    if config.fixture:
        return ssta_masks(load_inputs(config), config.tiles, config.ssta)
    return ssta_masks_from_seed(config.grid, config.tiles, config.ssta, config.seed, config.distribution)


def cmd_flops(config: BenchConfig) -> dict:
    sel, sta, combined, _ = _masks_for(config)
    report = {
        "schema_version": SCHEMA_VERSION,
        "engine_version": __version__,
        "config": config.to_dict(),
        "block_count": config.block_count,
        "block_tokens": config.tiles.block_tokens,
        "density": density(combined, config.grid, config.tiles, with_redundancy=config.ssta.beta > 0).to_dict(),
        "selective_density": float(sel.bits.mean()),
        "sta_density": float(sta.bits.mean()),
    }
    if config.preset:
        report["preset_note"] = PRESETS[config.preset].note
        if (ref := _paper_reference(config)) is not None:
            report["paper_reference"] = ref
    return report


def cmd_mask(config: BenchConfig, out_dir) -> dict[str, int]:
    sel, sta, combined, _ = _masks_for(config)
    return export_masks(out_dir, sel, sta, combined)


# -- verification suite -------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class VerifyResult:
    config: BenchConfig
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def table(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"{'check':<{width}}  result  detail"]
        for c in self.checks:
            lines.append(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL':<6}  {c.detail}")
        if not self.passed:
            cfg = self.config
            lines.append(
                f"reproduce with --seed {cfg.seed} --grid {','.join(map(str, cfg.grid.thw))} "
                f"--heads {cfg.grid.heads} --head-dim {cfg.grid.head_dim} "
                f"--tiles {','.join(map(str, cfg.tiles.thw))} --window {','.join(map(str, cfg.ssta.window.thw))} "
                f"--topk {cfg.ssta.top_k}"
            )
        return "\n".join(lines)


def brute_force_sta(block_grid: tuple[int, int, int], window: WindowSpec) -> np.ndarray:
    """All-pairs Chebyshev window predicate, one pair at a time."""
    coords = [tuple(int(c) for c in row) for row in block_coords(block_grid)]
    radii = [(w - 1) // 2 for w in window.thw]
    b = len(coords)
    out = np.zeros((b, b), dtype=bool)
    for i, j in itertools.product(range(b), repeat=2):
        ci, cj = coords[i], coords[j]
        out[i, j] = all(abs(a - c) <= r for a, c, r in zip(ci, cj, radii))
    return out


def random_masks(heads: int, blocks: int, seed: int, count: int = 3) -> list[BlockMask]:
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(count):
        bits = rng.random((heads, blocks, blocks)) < rng.uniform(0.1, 0.6)
        bits[:, np.arange(blocks), np.arange(blocks)] = True
        masks.append(BlockMask(bits, "combined"))
    return masks


def _flip_one_bit(mask: BlockMask) -> BlockMask:
    bits = mask.bits.copy()
    for i in range(bits.shape[1]):
        row = bits[0, i]
        clear = np.flatnonzero(~row)
        if len(clear):
            row[clear[0]] = True
            return BlockMask(bits, mask.kind)
        off = [j for j in np.flatnonzero(row) if j != i]
        if off:
            row[off[0]] = False
            return BlockMask(bits, mask.kind)
    raise ConfigError("cannot corrupt a single-block mask")


def cmd_verify(config: BenchConfig, corrupt_mask: bool = False, out_dir=None) -> VerifyResult:
    """Run the property suite at the configured shape."""
    grid, tiles, cfg = config.grid, config.tiles, config.ssta
    inputs = load_inputs(config)
    checks: list[Check] = []

    def check(name: str, passed: bool, detail: str):
        checks.append(Check(name, bool(passed), detail))

    sel, sta, combined, _ = ssta_masks(inputs, tiles, cfg)
    blocks = combined.block_count
    block_grid = tiles.block_grid(grid)

    check("sta_symmetry", np.array_equal(sta.bits, sta.bits.T), f"B={blocks}")
    brute = brute_force_sta(block_grid, cfg.window.clamped(block_grid))
    check("sta_brute_force", np.array_equal(sta.bits, brute), f"block grid {block_grid}, window {cfg.window.thw}")
    want = min(cfg.top_k, blocks)
    counts = sel.row_counts()
    check("selective_cardinality", (counts == want).all(), f"rows hold {sorted(set(counts.ravel().tolist()))}, want {want}")
    nonempty = combined.row_counts().min() >= 1
    check("combined_nonempty", nonempty, f"min row count {combined.row_counts().min()}")
    if cfg.force_self_block:
        diag = combined.bits[:, np.arange(blocks), np.arange(blocks)].all()
        check("combined_self_block", diag, "diagonal set on every head")

    cases = [("ssta", combined)] + [(f"random{i}", m) for i, m in enumerate(random_masks(grid.heads, blocks, config.seed))]
    for name, mask in cases:
        try:
            sparse = block_sparse_attention(inputs, mask, tiles, threads=config.threads)
        except EmptyRowError as exc:
            check(f"oracle_equivalence[{name}]", False, str(exc))
            continue
        checked = _flip_one_bit(mask) if corrupt_mask and name == "ssta" else mask
        oracle = masked_oracle_attention(inputs, checked, tiles)
        err = compare(sparse, oracle).max_abs
        check(f"oracle_equivalence[{name}]", err <= ORACLE_TOL, f"max_abs {err:.3e} (tol {ORACLE_TOL:g})")
        expected = density(checked, grid, tiles).sparse_macs
        counted = sparse.stats.total_macs
        check(f"mac_exactness[{name}]", counted == expected, f"counted {counted}, density x dense {expected}")

    dense = dense_attention(inputs, threads=config.threads)
    full = BlockMask(np.ones((grid.heads, blocks, blocks), dtype=bool), "combined")
    err = compare(block_sparse_attention(inputs, full, tiles, threads=config.threads), dense).max_abs
    check("degenerate_full_mask", err <= ORACLE_TOL, f"max_abs {err:.3e} vs dense")
    vacuous = replace(cfg, top_k=blocks, window=WindowSpec.full(block_grid))
    out, _, _ = ssta_attention(inputs, tiles, vacuous, threads=config.threads)
    err = compare(out, dense).max_abs
    check("degenerate_ssta", err <= ORACLE_TOL, f"max_abs {err:.3e} with k=B, full window")

    again = ssta_masks(inputs, tiles, cfg)[2]
    check("mask_determinism", again.equals(combined), "two mask generations bitwise equal")

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_mask_csv(out / "verify_mask_combined.csv", combined)
    return VerifyResult(config, checks)
