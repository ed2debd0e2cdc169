"""Command-line entry point.

    stpyramid gen-data --out data/
    stpyramid train --data data/ --out model.stpn [--variant D] [--config run.yaml]
    stpyramid eval model.stpn --data data/ [--dump-attention att/]
    stpyramid ablate --data data/ --out ablation.jsonl
    stpyramid bench --p1 1024 --p2 1024 --sketch-dim 4096

Run configs are flat YAML mappings whose keys are the union of the dataset,
model and training config fields. Keys present in several configs (seed,
c_s, c_t, grid_h, grid_w) set all of them. Exit codes: 0 success, 1 usage or
config error, 2 data or file format error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import timeit
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import data as D
from . import pyramid as P
from .sketch import count_sketch, explicit_bilinear, new_sketch_hash, stcb_forward

log = logging.getLogger("stpyramid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# run configs


@dataclass
class RunConfig:
    data: D.DatasetConfig = field(default_factory=D.DatasetConfig)
    model: P.PyramidConfig = field(default_factory=P.PyramidConfig)
    train: P.TrainConfig = field(default_factory=P.TrainConfig)

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "model": asdict(self.model), "train": asdict(self.train)}


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


_SECTIONS = {"data": _field_types(D.DatasetConfig), "model": _field_types(P.PyramidConfig),
             "train": _field_types(P.TrainConfig)}


def _coerce(key, value, type_name):
    t = str(type_name)
    try:
        if t == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if t == "int":
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if t == "float":
            return float(value)
        if t == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if t == "tuple":
            return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r}: cannot use {value!r} as {t}") from None
    return value


def build_run_config(values: dict | None = None) -> RunConfig:
    """Route flat keys to the section(s) that define them; unknown keys are errors."""
    values = dict(values or {})
    unknown = sorted(k for k in values if not any(k in s for s in _SECTIONS.values()))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    for section, types in _SECTIONS.items():
        updates = {k: _coerce(k, v, types[k]) for k, v in values.items() if k in types}
        setattr(cfg, section, replace(getattr(cfg, section), **updates))
    return cfg


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise UsageError(f"{path}: invalid YAML ({e})") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: expected a key/value mapping at top level")
    return raw


def resolve_config(args) -> RunConfig:
    values = load_config_file(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    cfg = build_run_config(values)
    model = cfg.model
    if getattr(args, "variant", None):
        model = P.variant_config(model, args.variant)
    if getattr(args, "fusion", None):
        model = replace(model, top_fusion_method=args.fusion)
        if args.fusion == "average_logits":
            model = replace(model, attention_enabled=False)
    if getattr(args, "paths", None) is not None:
        model = replace(model, m=args.paths)
    if getattr(args, "sketch_dim", None) is not None:
        model = replace(model, d_top=args.sketch_dim)
    cfg.model = model
    check_run_config(cfg)
    return cfg


def check_run_config(cfg: RunConfig) -> None:
    try:
        cfg.data.validate()
        cfg.model.validate()
        cfg.train.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    if cfg.model.n_classes != D.N_CLASSES:
        raise UsageError(f"n_classes must be {D.N_CLASSES} for the synthetic data")
    if cfg.model.m > cfg.data.n_chunks:
        raise UsageError(f"m={cfg.model.m} paths but the data has only {cfg.data.n_chunks} chunks")


def echo_config(cfg: RunConfig, out=None) -> None:
    print(json.dumps({"effective_config": cfg.to_dict()}, sort_keys=True), file=out or sys.stdout)


def get_data(args, cfg: RunConfig):
    if getattr(args, "data", None):
        train, test = D.load_dataset(args.data)
        if train.spatial_map.shape[1:] != (cfg.model.c_s, cfg.model.grid_h, cfg.model.grid_w) \
                or train.temporal_vecs.shape[2] != cfg.model.c_t:
            raise D.ManifestError(f"{args.data}: tensor shapes do not match the model config")
        return train, test
    return D.gen_dataset(cfg.data)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    train, test = D.gen_dataset(cfg.data)
    path = D.save_dataset(args.out, train, test, cfg.data)
    print(json.dumps({"manifest": str(path), "n_train": len(train), "n_test": len(test)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    train, test = get_data(args, cfg)
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")

    lines = []

    def record(rec):
        lines.append(json.dumps(rec, sort_keys=True))
        if args.verbose:
            print(lines[-1], file=sys.stderr)

    params, metrics = P.train(train, cfg.model, cfg.train, test_set=test, callback=record)
    P.save_checkpoint(out, params)
    tmp = metrics_path.with_name(metrics_path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    tmp.replace(metrics_path)
    acc, _ = P.evaluate(test, params)
    print(json.dumps({"checkpoint": str(out), "metrics": str(metrics_path), "epochs": len(metrics),
                      "test_acc": acc}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        params = P.load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise D.ManifestError(f"checkpoint not found: {args.checkpoint}") from None
    cfg = resolve_config(args)
    cfg.model = params.config
    check_run_config(cfg)
    echo_config(cfg)
    _, test = get_data(args, cfg)
    acc, confusion = P.evaluate(test, params)
    print(json.dumps({"accuracy": acc, "n": len(test), "confusion": confusion.tolist()}, sort_keys=True))
    if args.dump_attention:
        if params.attention is None:
            raise UsageError("--dump-attention needs a model with attention pooling")
        out = Path(args.dump_attention)
        out.mkdir(parents=True, exist_ok=True)
        for i in range(0, len(test), 256):
            _, caches = P.forward(test[i:i + 256], params)
            for j, w in enumerate(caches["attention_weights"]):
                D.save_tensor(out / f"attention_{i + j:05d}.sttf", w)
        print(json.dumps({"attention_maps": len(test), "dir": str(out)}))
    return EXIT_OK


def ablation_rows(base: P.PyramidConfig, n_chunks: int, sweeps: bool = True) -> list:
    """(group, name, model config) for the variant ladder and the sweeps."""
    rows = [("variant", v, P.variant_config(base, v)) for v in P.VARIANTS]
    if not sweeps:
        return rows
    two_stream = P.variant_config(base, "B")
    for method in ("average_logits", "concat", "sum", "stcb"):
        rows.append(("fusion", method, replace(two_stream, top_fusion_method=method)))
    full = P.variant_config(base, "D")
    for m in range(1, n_chunks + 1):
        rows.append(("paths", str(m), replace(full, m=m)))
    rows.append(("attention_input", "average", P.variant_config(base, "C")))
    for method in ("concat", "sum", "temporal", "stcb"):
        rows.append(("attention_input", method, replace(full, attention_input=method)))
    return rows


def subset_accuracy(labels, preds, bit: int) -> float:
    """Accuracy on one attribute: does the prediction get that bit right."""
    return float(np.mean(np.asarray(D.attributes(preds)[bit]) == np.asarray(D.attributes(labels)[bit])))


def run_ablation(train, test, base: RunConfig, sweeps=True, progress=None) -> list[dict]:
    results, done = [], {}
    for group, name, model in ablation_rows(base.model, base.data.n_chunks, sweeps):
        key = json.dumps(asdict(model), sort_keys=True)
        if key not in done:
            t0 = time.perf_counter()
            params, metrics = P.train(train, model, base.train)
            preds = P.predict(test, params)
            done[key] = {
                "test_acc": float(np.mean(preds == test.labels)),
                "background_acc": subset_accuracy(test.labels, preds, 0),
                "actor_acc": subset_accuracy(test.labels, preds, 1),
                "pattern_acc": subset_accuracy(test.labels, preds, 2),
                "final_loss": metrics[-1]["loss"] if metrics else None,
                "n_parameters": params.n_parameters(),
                "seconds": round(time.perf_counter() - t0, 2),
            }
        row = {"group": group, "name": name, **done[key],
               "config": {"model": asdict(model), "train": asdict(base.train), "data": asdict(base.data)}}
        results.append(row)
        if progress:
            progress(row)
    return results


def format_table(rows) -> str:
    head = f"{'group':<16}{'name':<16}{'test':>7}{'actor':>7}{'pattern':>9}{'params':>9}"
    out = [head, "-" * len(head)]
    for r in rows:
        out.append(f"{r['group']:<16}{r['name']:<16}{r['test_acc']:>7.3f}{r['actor_acc']:>7.3f}"
                   f"{r['pattern_acc']:>9.3f}{r['n_parameters']:>9d}")
    return "\n".join(out)


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.iterations is not None:
        cfg.train = replace(cfg.train, iterations=args.iterations)
    echo_config(cfg)
    train, test = get_data(args, cfg)
    lines = []

    def progress(row):
        lines.append(json.dumps(row, sort_keys=True))
        log.info("%s %s: %.3f", row["group"], row["name"], row["test_acc"])

    rows = run_ablation(train, test, cfg, sweeps=not args.no_sweeps, progress=progress)
    print(format_table(rows))
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
    return EXIT_OK


def bench(p1: int, p2: int, d: int, reps: int = 100, seed: int = 0, rounds: int = 5) -> dict:
    """Time STCB against materialising the explicit outer product.

    Each timing is the best of `rounds` runs of `reps` calls.
    """
    if min(p1, p2, d, reps, rounds) < 1:
        raise UsageError("dimensions, repetitions and rounds must be positive")
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=p1), rng.normal(size=p2)
    hashes = [new_sketch_hash(p1, d, seed + 1), new_sketch_hash(p2, d, seed + 2)]
    fused, _ = stcb_forward([x, y], hashes)
    full = explicit_bilinear(x, y)
    t_stcb = min(timeit.repeat(lambda: stcb_forward([x, y], hashes), number=reps, repeat=rounds))
    t_explicit = min(timeit.repeat(lambda: explicit_bilinear(x, y), number=reps, repeat=rounds))
    return {
        "p1": p1, "p2": p2, "d": d, "repetitions": reps, "rounds": rounds,
        "stcb_size": int(fused.size), "explicit_size": int(full.size),
        "size_ratio": full.size / fused.size,
        "stcb_bytes": int(fused.nbytes), "explicit_bytes": int(full.nbytes),
        "stcb_seconds": t_stcb, "explicit_seconds": t_explicit,
        "speedup": t_explicit / t_stcb,
    }


def cmd_bench(args) -> int:
    report = bench(args.p1, args.p2, args.sketch_dim, args.reps, args.seed or 0, args.rounds)
    if args.check_identity:
        # the sketch really is the count sketch of the outer product (small dims only)
        report["max_identity_error"] = identity_error(min(args.p1, 64), min(args.p2, 64), args.sketch_dim)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def identity_error(p1, p2, d, seed=0) -> float:
    from .sketch import combined_outer_hash

    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=p1), rng.normal(size=p2)
    ha, hb = new_sketch_hash(p1, d, seed + 1), new_sketch_hash(p2, d, seed + 2)
    fused, _ = stcb_forward([x, y], [ha, hb])
    return float(np.max(np.abs(fused - count_sketch(explicit_bilinear(x, y), combined_outer_hash(ha, hb)))))


# --------------------------------------------------------------------------


def _add_common(p, model_flags=True):
    p.add_argument("--config", help="flat YAML run config")
    p.add_argument("--seed", type=int, help="master seed (data, init, batching)")
    if model_flags:
        p.add_argument("--variant", choices=P.VARIANTS)
        p.add_argument("--fusion", choices=P.TOP_METHODS, help="top-level fusion method")
        p.add_argument("--paths", type=int, help="number of temporal paths m")
        p.add_argument("--sketch-dim", type=int, help="top-level sketch dimension")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stpyramid", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    _add_common(p, model_flags=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics log path (default: <out>.metrics.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix on the test split")
    p.add_argument("checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--dump-attention", metavar="DIR", help="write one [H, W] attention map per sample")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variant ladder plus fusion, path and attention-input sweeps")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out", help="JSONL file, one row per run")
    p.add_argument("--iterations", type=int)
    p.add_argument("--no-sweeps", action="store_true", help="only the A/B/C/D rows")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="STCB versus explicit bilinear timing")
    p.add_argument("--p1", type=int, default=1024)
    p.add_argument("--p2", type=int, default=1024)
    p.add_argument("--sketch-dim", type=int, default=4096)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--rounds", type=int, default=5, help="timings report the best round")
    p.add_argument("--seed", type=int)
    p.add_argument("--check-identity", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help or a usage error
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except P.DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (D.TensorFormatError, D.ManifestError, P.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
