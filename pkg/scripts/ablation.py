"""Variant ladder and sweeps over several training seeds.

    python scripts/ablation.py --seeds 0 1 2 --out results/ablation.jsonl
"""

import argparse
import json
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from stpyramid.cli import build_run_config, format_table, run_ablation
from stpyramid.data import gen_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--no-sweeps", action="store_true")
    ap.add_argument("--out", default="results/ablation.jsonl")
    args = ap.parse_args()

    base = build_run_config({})
    train_set, test_set = gen_dataset(base.data)  # one data seed for every run
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    acc = defaultdict(list)
    with open(out, "w") as f:
        for seed in args.seeds:
            cfg = replace(base, train=replace(base.train, seed=seed, iterations=args.iterations))
            rows = run_ablation(train_set, test_set, cfg, sweeps=not args.no_sweeps)
            print(f"\ntraining seed {seed}\n" + format_table(rows))
            for row in rows:
                f.write(json.dumps({"seed": seed, **row}, sort_keys=True) + "\n")
                acc[(row["group"], row["name"])].append(row["test_acc"])

    print("\nmean test accuracy over seeds")
    for (group, name), vals in acc.items():
        print(f"{group:<16}{name:<16}{np.mean(vals):.3f} +- {np.std(vals):.3f}")


if __name__ == "__main__":
    main()
