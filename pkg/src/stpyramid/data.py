"""Synthetic conv-feature "videos", the STTF tensor file format and manifests.

Each sample is what the last conv layer of a two-stream network would emit:
a spatial feature map [C_s, H, W] and m temporal chunk vectors [C_t].
The 8 classes are the product of three binary attributes:

    label = 4 * background + 2 * actor + pattern

* background: a grid-wide channel signature; average pooling sees it clearly.
* actor: a signature confined to 1-2 adjacent cells. Its sign is flipped at
  random per sample together with a motion component present in every
  temporal chunk, so only spatial x temporal products carry it consistently,
  and average pooling dilutes it by the grid size.
* pattern: chunk k carries rho * pattern_sign[k] * c for a random global sign
  rho; pattern 0 is (+, +, +), pattern 1 alternates (+, -, +). Each chunk on
  its own has the same distribution under both patterns.

Chunk jitter follows an AR(1) process whose lag-one correlation is
exp(-chunk_interval / chunk_length), the feature-level stand-in for sampling
optical-flow stacks of length L at stride tau.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

N_CLASSES = 8

TENSOR_MAGIC = b"STTF"
TENSOR_VERSION = 1
DTYPE_F64 = 1
_HEADER = struct.Struct("<4sHBB")  # magic, version, dtype code, rank


class TensorFormatError(ValueError):
    """Raised when a tensor file is malformed or truncated."""


class ManifestError(ValueError):
    """Raised when a manifest or a file it references fails validation."""


def attributes(label):
    """(background, actor, pattern) bits of a class id."""
    label = np.asarray(label)
    return label // 4, (label // 2) % 2, label % 2


@dataclass
class DatasetConfig:
    n_train: int = 512
    n_test: int = 256
    c_s: int = 64
    c_t: int = 64
    grid_h: int = 7
    grid_w: int = 7
    n_chunks: int = 3
    noise_sigma: float = 0.1
    chunk_interval: float = 5.0
    chunk_length: float = 10.0
    # signal amplitudes (vector norms)
    offset: float = 1.0
    background_scale: float = 1.0
    nuisance_scale: float = 0.1
    actor_scale: float = 3.0
    marker_scale: float = 1.5
    motion_scale: float = 1.0
    pattern_scale: float = 1.0
    jitter_scale: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train", "n_test", "c_s", "c_t", "grid_h", "grid_w", "n_chunks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.chunk_interval <= 0 or self.chunk_length <= 0:
            raise ValueError("chunk_interval and chunk_length must be positive")


@dataclass
class VideoSample:
    spatial_map: np.ndarray  # [C_s, H, W]
    temporal_vecs: np.ndarray  # [m, C_t]
    label: int


@dataclass
class Dataset:
    """Stacked samples; indexing returns a VideoSample."""

    spatial_map: np.ndarray  # [N, C_s, H, W]
    temporal_vecs: np.ndarray  # [N, m, C_t]
    labels: np.ndarray  # [N]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return VideoSample(self.spatial_map[i], self.temporal_vecs[i], int(self.labels[i]))
        return Dataset(self.spatial_map[i], self.temporal_vecs[i], self.labels[i], self.meta)

    @classmethod
    def from_samples(cls, samples, meta=None):
        return cls(
            np.stack([s.spatial_map for s in samples]),
            np.stack([s.temporal_vecs for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64),
            meta or {},
        )


def _unit(rng, n):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def make_prototypes(config: DatasetConfig) -> dict:
    """Class-independent building blocks, fixed by the dataset seed."""
    rng = np.random.default_rng([config.seed, 0])
    cs, ct = config.c_s, config.c_t
    return {
        "offset_s": np.full(cs, config.offset / np.sqrt(cs)),
        "offset_t": np.full(ct, config.offset / np.sqrt(ct)),
        "background": np.stack([_unit(rng, cs) for _ in range(2)]) * config.background_scale,
        "actor": np.stack([_unit(rng, cs) for _ in range(2)]) * config.actor_scale,
        "marker": _unit(rng, cs) * config.marker_scale,
        "motion": _unit(rng, ct) * config.motion_scale,
        "pattern": _unit(rng, ct) * config.pattern_scale,
    }


def pattern_signs(pattern: int, n_chunks: int) -> np.ndarray:
    if pattern == 0:
        return np.ones(n_chunks)
    return np.array([1.0 if k % 2 == 0 else -1.0 for k in range(n_chunks)])


def actor_cells(rng, h: int, w: int) -> list:
    """A random 1-2 cell region (second cell 4-adjacent to the first)."""
    r, c = int(rng.integers(h)), int(rng.integers(w))
    cells = [(r, c)]
    if rng.random() < 0.5:
        nbrs = [(r + dr, c + dc) for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0))
                if 0 <= r + dr < h and 0 <= c + dc < w]
        if nbrs:
            cells.append(nbrs[int(rng.integers(len(nbrs)))])
    return cells


def _draw_sample(config: DatasetConfig, protos: dict, label: int, rng, q=None, rho=None, noise: bool = True):
    bg, actor, pattern = (int(a) for a in attributes(label))
    cs, ct, h, w, m = config.c_s, config.c_t, config.grid_h, config.grid_w, config.n_chunks
    if q is None:
        q = float(rng.choice([-1.0, 1.0]))  # couples actor cells and temporal motion
    if rho is None:
        rho = float(rng.choice([-1.0, 1.0]))  # global phase of the temporal pattern

    base = protos["offset_s"] + protos["background"][bg]
    base = base + rng.normal(size=cs) * config.nuisance_scale / np.sqrt(cs)
    spatial = np.repeat(base[:, None, None], h, axis=1).repeat(w, axis=2)
    for r, c in actor_cells(rng, h, w):
        spatial[:, r, c] += q * (protos["marker"] + protos["actor"][actor])

    rho_j = np.exp(-config.chunk_interval / config.chunk_length)
    jitter = np.empty((m, ct))
    jitter[0] = rng.normal(size=ct)
    for k in range(1, m):
        jitter[k] = rho_j * jitter[k - 1] + np.sqrt(1 - rho_j**2) * rng.normal(size=ct)
    jitter *= config.jitter_scale / np.sqrt(ct)
    signs = pattern_signs(pattern, m)
    temporal = (protos["offset_t"] + q * protos["motion"])[None, :] \
        + rho * signs[:, None] * protos["pattern"][None, :] + jitter

    if noise and config.noise_sigma > 0:
        spatial = spatial + rng.normal(scale=config.noise_sigma, size=spatial.shape)
        temporal = temporal + rng.normal(scale=config.noise_sigma, size=temporal.shape)
    return VideoSample(spatial, temporal, label)


def _gen_split(config, protos, n, stream):
    rng = np.random.default_rng([config.seed, stream])
    labels = np.arange(n) % N_CLASSES
    rng.shuffle(labels)
    # both signs are balanced within each class so that class-conditional
    # means do not drift with the sampled sign counts
    q, rho = np.empty(n), np.empty(n)
    for k in range(N_CLASSES):
        idx = np.flatnonzero(labels == k)
        for arr in (q, rho):
            arr[idx] = rng.permutation(np.resize([1.0, -1.0], len(idx)))
    samples = [_draw_sample(config, protos, int(k), rng, q[i], rho[i]) for i, k in enumerate(labels)]
    return Dataset.from_samples(samples, meta={"config": asdict(config)})


def gen_dataset(config: DatasetConfig) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair; the splits use separate PRNG streams."""
    config.validate()
    protos = make_prototypes(config)
    return _gen_split(config, protos, config.n_train, 1), _gen_split(config, protos, config.n_test, 2)


# --------------------------------------------------------------------------
# STTF tensor files: "STTF", u16 version, u8 dtype code, u8 rank,
# rank x u64 extents, then float64 little-endian payload in row-major order.


def save_tensor(path, tensor) -> None:
    arr = np.asarray(tensor, dtype="<f8")
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError(f"unsupported rank {arr.ndim}")
    arr = np.ascontiguousarray(arr)
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())
    os.replace(tmp, path)


def _read_header(f, path):
    raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, version, dtype, rank = _HEADER.unpack(raw)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F64:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    raw = f.read(8 * rank)
    if len(raw) < 8 * rank:
        raise TensorFormatError(f"{path}: truncated shape")
    return struct.unpack(f"<{rank}Q", raw)


def read_tensor_header(path) -> tuple:
    """Validate header and payload length; return the shape."""
    path = Path(path)
    with open(path, "rb") as f:
        shape = _read_header(f, path)
        start = f.tell()
    expected = int(np.prod(shape)) * 8
    actual = path.stat().st_size - start
    if actual != expected:
        raise TensorFormatError(f"{path}: payload has {actual} bytes, expected {expected}")
    return shape


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        shape = _read_header(f, path)
        payload = f.read()
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise TensorFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


# --------------------------------------------------------------------------
# Manifests: JSON with {"format": "stpyramid-manifest", "version": 1,
# "n_classes": K, "config": {...}, "samples": [{"id", "split", "label",
# "spatial", "temporal"}]}; paths are relative to the manifest file.

MANIFEST_FORMAT = "stpyramid-manifest"


def save_dataset(out_dir, train: Dataset, test: Dataset, config: DatasetConfig | None = None) -> Path:
    """Write one spatial and one temporal tensor file per sample plus manifest.json."""
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, ds in (("train", train), ("test", test)):
        for i in range(len(ds)):
            sid = f"{split}_{i:05d}"
            sp, tp = f"samples/{sid}_spatial.sttf", f"samples/{sid}_temporal.sttf"
            save_tensor(out_dir / sp, ds.spatial_map[i])
            save_tensor(out_dir / tp, ds.temporal_vecs[i])
            entries.append({"id": sid, "split": split, "label": int(ds.labels[i]), "spatial": sp, "temporal": tp})
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "n_classes": N_CLASSES,
        "config": asdict(config) if config is not None else train.meta.get("config", {}),
        "samples": entries,
    }
    return save_manifest(out_dir / "manifest.json", manifest)


def save_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def load_manifest(path) -> dict:
    """Parse a manifest and validate labels and every referenced file header."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e})") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    k = int(manifest.get("n_classes", N_CLASSES))
    root = path.parent
    for entry in manifest.get("samples", []):
        label = entry.get("label")
        if not isinstance(label, int) or not 0 <= label < k:
            raise ManifestError(f"sample {entry.get('id')}: label {label!r} outside [0, {k})")
        if entry.get("split") not in ("train", "test"):
            raise ManifestError(f"sample {entry.get('id')}: unknown split {entry.get('split')!r}")
        for key in ("spatial", "temporal"):
            fp = root / entry[key]
            if not fp.exists():
                raise ManifestError(f"missing file referenced by manifest: {fp}")
            read_tensor_header(fp)
    manifest["root"] = str(root)
    return manifest


def load_dataset(path) -> tuple[Dataset, Dataset]:
    manifest = load_manifest(path)
    root = Path(manifest["root"])
    splits = {"train": [], "test": []}
    for entry in manifest["samples"]:
        splits[entry["split"]].append(VideoSample(
            load_tensor(root / entry["spatial"]), load_tensor(root / entry["temporal"]), entry["label"]))
    meta = {"config": manifest.get("config", {})}
    out = []
    for split in ("train", "test"):
        if not splits[split]:
            raise ManifestError(f"{root}: no {split} samples")
        out.append(Dataset.from_samples(splits[split], meta))
    return out[0], out[1]
