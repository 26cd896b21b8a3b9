"""Mask density and MAC counts for every shape preset, without running attention.

Full-size presets generate Q/K one head at a time; pass --heads to trim them.

    python3 scripts/preset_flops.py --heads 1
"""

import argparse
from dataclasses import replace

from ssta.bench import PRESETS, BenchConfig, cmd_flops


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--heads", type=int, help="override head count (full presets use 16)")
    parser.add_argument("--presets", nargs="+", default=sorted(PRESETS))
    args = parser.parse_args()

    print(f"{'preset':<18} {'tokens':>8} {'blocks':>6} {'rho':>7} {'sel':>7} {'sta':>7} {'MAC x':>7}  reference")
    for name in args.presets:
        config = BenchConfig.from_preset(name)
        if args.heads:
            config = replace(config, grid=replace(config.grid, heads=args.heads))
        r = cmd_flops(config)
        ref = r.get("paper_reference", {})
        timing = ", ".join(f"{k}={v}" for k, v in ref.items() if k not in ("preset", "flag"))
        print(f"{name:<18} {config.grid.token_count:>8} {r['block_count']:>6} {r['density']['density']:>7.4f} "
              f"{r['selective_density']:>7.4f} {r['sta_density']:>7.4f} {r['density']['theoretical_speedup']:>7.2f}  {timing}")


if __name__ == "__main__":
    main()
