"""``ssta verify|bench|mask|flops`` command-line harness.

Exit codes: 0 success, 1 verification failure, 2 configuration error, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import PRESETS, BenchConfig, cmd_bench, cmd_flops, cmd_mask, cmd_verify, latent_grid, load_inputs
from .grid import ConfigError, GridSpec, TileSpec, WindowSpec, write_fixture
from .masking import SstaConfig

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

DEFAULTS = {
    "heads": 2,
    "head_dim": 32,
    "grid": (8, 16, 16),
    "tiles": (2, 4, 4),
    "window": (3, 3, 3),
    "topk": 8,
}


def _triple(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return parts


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("shape")
    g.add_argument("--preset", choices=sorted(PRESETS), help="shape preset; explicit flags override it")
    g.add_argument("--grid", type=_triple, metavar="F,H,W")
    g.add_argument("--heads", type=int)
    g.add_argument("--head-dim", type=int)
    g.add_argument("--tiles", type=_triple, metavar="t,h,w")
    s = parser.add_argument_group("ssta")
    s.add_argument("--window", type=_triple, metavar="t,h,w")
    s.add_argument("--topk", type=int)
    s.add_argument("--lambda", dest="lambda_", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--mode", choices=("and", "or"), default="and", help="combine masks by intersection or union")
    s.add_argument("--force-self", type=_bool, default=True, metavar="BOOL")
    s.add_argument("--redundancy-norm", choices=("mean", "paper"), default="mean")
    r = parser.add_argument_group("run")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--distribution", choices=("standard-normal", "unit-sphere"), default="standard-normal")
    r.add_argument("--fixture", help="read Q/K/V from a fixture file instead of generating them")
    r.add_argument("--save-fixture", help="write the generated Q/K/V to this fixture file")
    r.add_argument("--repeats", type=int, default=5)
    r.add_argument("--warmup", type=int, default=1)
    r.add_argument("--threads", type=int, default=1, help="0 = one per CPU, 1 = deterministic")
    r.add_argument("--out", help="output file (bench, flops) or directory (verify, mask)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    verify = sub.add_parser("verify", help="run the property suite at one shape")
    verify.add_argument("--corrupt-mask", action="store_true", help="flip one mask bit after attention")
    bench = sub.add_parser("bench", help="time dense and sparse attention")
    bench.add_argument("--run", choices=("dense", "sparse", "both"), default="both")
    sub.add_parser("mask", help="export selective, window and combined masks")
    sub.add_parser("flops", help="report density and MAC counts")
    sub.add_parser("presets", help="list shape presets")
    for p in (verify, bench, *(sub.choices[n] for n in ("mask", "flops"))):
        _common(p)
    return parser


def config_from_args(args: argparse.Namespace) -> BenchConfig:
    base = PRESETS[args.preset] if args.preset else None

    def pick(name, preset_value):
        value = getattr(args, name)
        if value is not None:
            return value
        return preset_value if base else DEFAULTS[name]

    grid = GridSpec(
        pick("heads", base and base.grid.heads),
        *pick("grid", base and base.grid.thw),
        pick("head_dim", base and base.grid.head_dim),
    )
    ssta = SstaConfig(
        lambda_=args.lambda_,
        beta=args.beta,
        top_k=pick("topk", base and base.top_k),
        window=WindowSpec(*pick("window", base and base.window.thw)),
        combine_mode="intersection" if args.mode == "and" else "union",
        force_self_block=args.force_self,
        redundancy_norm=args.redundancy_norm,
    )
    return BenchConfig(
        grid=grid,
        tiles=TileSpec(*pick("tiles", base and base.tiles.thw)),
        ssta=ssta,
        seed=args.seed,
        repeats=args.repeats,
        warmup=args.warmup,
        threads=args.threads,
        mode=getattr(args, "run", "both"),
        distribution=args.distribution,
        preset=args.preset,
        fixture=args.fixture,
    )


def _emit_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _list_presets() -> None:
    for name, p in PRESETS.items():
        print(f"{name:<18} grid {p.grid.thw} heads {p.grid.heads} D {p.grid.head_dim} tiles {p.tiles.thw}  # {p.note}")
    print(f"720p/241f latent grid before rounding: {latent_grid(720, 1280, 241)}")


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        _list_presets()
        return EXIT_OK
    try:
        config = config_from_args(args)
        if args.save_fixture:
            write_fixture(args.save_fixture, load_inputs(config))
        if args.command == "verify":
            result = cmd_verify(config, corrupt_mask=args.corrupt_mask, out_dir=args.out)
            print(result.table())
            return EXIT_OK if result.passed else EXIT_VERIFY
        if args.command == "bench":
            _emit_json(cmd_bench(config).to_dict(), args.out)
        elif args.command == "flops":
            _emit_json(cmd_flops(config), args.out)
        elif args.command == "mask":
            if not args.out:
                raise ConfigError("mask requires --out DIR")
            counts = cmd_mask(config, args.out)
            print(json.dumps({"out": args.out, "rows": counts}))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MemoryError as exc:
        print(f"configuration error: out of memory ({exc})", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
