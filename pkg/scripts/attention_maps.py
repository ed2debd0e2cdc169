"""Train the full model and measure how much attention lands on the actor cells.

    python scripts/attention_maps.py --iterations 2000
"""

import argparse

import numpy as np

from stpyramid.data import DatasetConfig, gen_dataset, make_prototypes
from stpyramid.pyramid import PyramidConfig, TrainConfig, evaluate, forward, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data_cfg = DatasetConfig()
    tr, te = gen_dataset(data_cfg)
    params, metrics = train(tr, PyramidConfig(), TrainConfig(iterations=args.iterations, seed=args.seed), test_set=te)
    for rec in metrics[:: max(1, len(metrics) // 10)]:
        print(f"epoch {rec['epoch']:3d}  loss {rec['loss']:.4f}  train {rec['train_acc']:.3f}  test {rec['test_acc']:.3f}")
    acc, confusion = evaluate(te, params)
    print(f"test accuracy {acc:.3f}\nconfusion [true, predicted]:\n{confusion}")

    # actor cells are the ones whose map projects strongly onto the marker signature
    marker = make_prototypes(data_cfg)["marker"]
    proj = np.abs(np.einsum("nchw,c->nhw", te.spatial_map, marker))
    actor = proj > 0.5 * marker @ marker
    weights = forward(te, params)[1]["attention_weights"]
    mass = (weights * actor).sum(axis=(1, 2))
    uniform = actor.sum(axis=(1, 2)) / actor[0].size
    print(f"attention mass on actor cells: {mass.mean():.3f} (uniform pooling would give {uniform.mean():.3f})")


if __name__ == "__main__":
    main()
