"""STCB versus explicit bilinear fusion across sketch dimensions.

    python scripts/bench_sketch_dim.py --dims 1024 2048 4096 8192 16384
"""

import argparse

from stpyramid.cli import bench


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--p", type=int, default=1024)
    ap.add_argument("--dims", type=int, nargs="+", default=[1024, 2048, 4096, 8192, 16384])
    ap.add_argument("--reps", type=int, default=100)
    args = ap.parse_args()

    print(f"{'d':>7}{'size ratio':>12}{'stcb ms':>10}{'explicit ms':>13}{'speedup':>9}")
    for d in args.dims:
        r = bench(args.p, args.p, d, reps=args.reps)
        print(f"{d:>7}{r['size_ratio']:>12.0f}{r['stcb_seconds'] / args.reps * 1e3:>10.3f}"
              f"{r['explicit_seconds'] / args.reps * 1e3:>13.3f}{r['speedup']:>9.1f}")


if __name__ == "__main__":
    main()
