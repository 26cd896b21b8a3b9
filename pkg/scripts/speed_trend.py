"""Sparse vs dense wall-clock as mask density grows, on one scaled preset.

    python3 scripts/speed_trend.py --preset 720p-241f-scaled --topk 8 32 56 96 --repeats 3
"""

import argparse
import json
from dataclasses import replace

from ssta.attention import block_sparse_attention, dense_attention, ssta_masks
from ssta.bench import PRESETS, BenchConfig, timed, load_inputs, median_mad
from ssta.metrics import density


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="720p-241f-scaled", choices=sorted(PRESETS))
    parser.add_argument("--topk", type=int, nargs="+", default=[8, 32, 56, 96])
    parser.add_argument("--mode", choices=("intersection", "union"), default="union")
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="write rows as JSON here")
    args = parser.parse_args()

    config = BenchConfig.from_preset(args.preset, seed=args.seed, repeats=args.repeats, threads=1)
    inputs = load_inputs(config)
    dense_times, _ = timed(lambda: dense_attention(inputs), args.repeats, 1)
    dense_med = median_mad(dense_times)["median"]
    print(f"{args.preset}: {config.grid.token_count} tokens, {config.block_count} blocks, dense {dense_med:.3f}s")

    rows = []
    for k in args.topk:
        cfg = replace(config.ssta, top_k=k, combine_mode=args.mode)
        _, _, mask, _ = ssta_masks(inputs, config.tiles, cfg)
        rho = density(mask, config.grid, config.tiles)
        times, _ = timed(lambda: block_sparse_attention(inputs, mask, config.tiles), args.repeats, 1)
        med = median_mad(times)["median"]
        rows.append({"top_k": k, "density": rho.density, "sparse_s": med, "dense_s": dense_med,
                     "measured_speedup": dense_med / med, "mac_speedup": rho.theoretical_speedup})
        print(f"k={k:<4} rho={rho.density:.3f}  sparse {med:.3f}s  x{dense_med / med:.2f} "
              f"(MAC model x{rho.theoretical_speedup:.2f})")

    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
