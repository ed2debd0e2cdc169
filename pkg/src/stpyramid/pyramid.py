"""Three-level spatiotemporal fusion pyramid.

Level 1 fuses the m temporal chunk vectors, level 2 pools the spatial map with
attention guided by the fused temporal vector, level 3 fuses the average-pooled
spatial vector, the fused temporal vector and the attended vector into one
representation that feeds a two-layer classifier trained with one loss.

Ablation variants:

    A  two independent heads (spatial average, single temporal chunk),
       class posteriors averaged
    B  A's inputs fused by the top compact bilinear layer, one head
    C  B with m-path temporal fusion
    D  C with attention pooling (the full model)
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensorops as T
from .attention import ATTENTION_INPUTS, AttentionParams, attend_backward, attend_forward, init_attention
from .sketch import (
    SketchHash,
    count_sketch,
    count_sketch_adjoint,
    new_sketch_hash,
    signed_sqrt_l2,
    signed_sqrt_l2_backward,
    stcb_backward,
    stcb_forward,
)

log = logging.getLogger(__name__)

TEMPORAL_METHODS = ("stcb", "concat", "sum")
TOP_METHODS = ("stcb", "concat", "sum", "average_logits")
VARIANTS = ("A", "B", "C", "D")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class PyramidConfig:
    m: int = 3
    c_s: int = 64
    c_t: int = 64
    grid_h: int = 7
    grid_w: int = 7
    d_t: int = 256
    d_att: int = 128
    d_top: int = 512
    n_hidden: int = 64
    head_width: int = 128
    n_classes: int = 8
    temporal_fusion_method: str = "stcb"
    top_fusion_method: str = "stcb"
    attention_enabled: bool = True
    attention_input: str = "stcb"
    post_sketch_normalize: bool = False

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")
        if self.temporal_fusion_method not in TEMPORAL_METHODS:
            raise ValueError(f"temporal_fusion_method must be one of {TEMPORAL_METHODS}")
        if self.top_fusion_method not in TOP_METHODS:
            raise ValueError(f"top_fusion_method must be one of {TOP_METHODS}")
        if self.attention_input not in ATTENTION_INPUTS:
            raise ValueError(f"attention_input must be one of {ATTENTION_INPUTS}")
        if self.top_fusion_method == "average_logits" and self.attention_enabled:
            raise ValueError("average_logits (two-stream baseline) has no attention pathway")

    @property
    def temporal_dim(self) -> int:
        if self.m == 1 or self.temporal_fusion_method == "sum":
            return self.c_t
        if self.temporal_fusion_method == "concat":
            return self.m * self.c_t
        return self.d_t

    @property
    def top_dim(self) -> int:
        if self.top_fusion_method == "concat":
            return 2 * self.c_s + self.temporal_dim
        return self.d_top


def variant_config(base: PyramidConfig, label: str) -> PyramidConfig:
    """Configuration of an ablation row, keeping base dimensions."""
    if label == "A":
        return replace(base, m=1, top_fusion_method="average_logits", attention_enabled=False)
    if label == "B":
        return replace(base, m=1, top_fusion_method="stcb", attention_enabled=False)
    if label == "C":
        return replace(base, temporal_fusion_method="stcb", top_fusion_method="stcb", attention_enabled=False)
    if label == "D":
        return replace(base, temporal_fusion_method="stcb", top_fusion_method="stcb", attention_enabled=True)
    raise ValueError(f"unknown variant {label!r}; expected one of {VARIANTS}")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_milestones: tuple = (0.6, 0.85)
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")

    def lr_at(self, it: int) -> float:
        n_decays = sum(it >= f * self.iterations for f in self.lr_milestones)
        return self.lr * self.lr_decay**n_decays


@dataclass
class PyramidParams:
    config: PyramidConfig
    temporal_hashes: list  # m hashes when temporal STCB is active, else []
    attention: AttentionParams | None
    top_hashes: list  # 3 hashes for stcb/sum top fusion, else []
    heads: dict  # name -> [DenseLayer, DenseLayer]; "main" or "spatial"/"temporal"
    velocity: dict = field(default_factory=dict)

    def arrays(self) -> dict:
        """Trainable arrays by name (live references)."""
        out = {}
        for hname, layers in self.heads.items():
            for i, layer in enumerate(layers):
                out[f"head.{hname}.{i}.weight"] = layer.weight
                out[f"head.{hname}.{i}.bias"] = layer.bias
        if self.attention is not None:
            for k, v in self.attention.arrays().items():
                out[f"attention.{k}"] = v
        return out

    def hashes(self) -> dict:
        out = {f"temporal.{i}": h for i, h in enumerate(self.temporal_hashes)}
        if self.attention is not None:
            out["attention.spatial"] = self.attention.spatial_hash
            out["attention.temporal"] = self.attention.temporal_hash
        out.update({f"top.{i}": h for i, h in enumerate(self.top_hashes)})
        return out

    def n_parameters(self, include_fixed: bool = True) -> int:
        """Trainable entries, plus the index and sign maps of every hash."""
        n = sum(a.size for a in self.arrays().values())
        if include_fixed:
            n += sum(2 * h.p for h in self.hashes().values())
        return n


def _hash_seeds(seed: int, n: int) -> list[int]:
    seeds = [int(s) for s in np.random.SeedSequence([seed, 1]).generate_state(n, dtype=np.uint64)]
    if len(set(seeds)) != n:
        raise RuntimeError("hash seed collision")
    return seeds


def _head(n_in, width, k, rng):
    return [T.he_init(T.DenseLayer, n_in, width, rng), T.he_init(T.DenseLayer, width, k, rng)]


def build_params(config: PyramidConfig, seed: int) -> PyramidParams:
    """Deterministic initialisation; every hash gets its own seed."""
    config.validate()
    rng = np.random.default_rng([seed, 0])
    seeds = iter(_hash_seeds(seed, config.m + 5))
    temporal_hashes = []
    if config.m > 1 and config.temporal_fusion_method == "stcb":
        temporal_hashes = [new_sketch_hash(config.c_t, config.d_t, next(seeds)) for _ in range(config.m)]
    else:
        for _ in range(config.m):
            next(seeds)
    att_seeds = (next(seeds), next(seeds))
    attention = None
    if config.attention_enabled:
        attention = init_attention(config.c_s, config.temporal_dim, config.d_att, config.n_hidden,
                                   att_seeds, rng, method=config.attention_input)
    top_hashes = []
    k, w = config.n_classes, config.head_width
    if config.top_fusion_method == "average_logits":
        heads = {"spatial": _head(config.c_s, w, k, rng), "temporal": _head(config.temporal_dim, w, k, rng)}
    else:
        if config.top_fusion_method in ("stcb", "sum"):
            dims = (config.c_s, config.temporal_dim, config.c_s)
            top_hashes = [new_sketch_hash(p, config.d_top, next(seeds)) for p in dims]
        heads = {"main": _head(config.top_dim, w, k, rng)}
    return PyramidParams(config, temporal_hashes, attention, top_hashes, heads)


def select_paths(temporal_vecs: np.ndarray, m: int) -> np.ndarray:
    """The m chunks centred in the available sequence ([..., M, C_t] -> [..., m, C_t])."""
    n = temporal_vecs.shape[-2]
    if m > n:
        raise ValueError(f"model uses {m} temporal paths but samples carry {n}")
    start = (n - m) // 2
    return temporal_vecs[..., start:start + m, :]


def temporal_fuse(temporal_vecs, params: PyramidParams, method: str | None = None):
    """Fuse [..., m, C_t] chunks. Returns (fused, cache)."""
    config = params.config
    method = method or config.temporal_fusion_method
    temporal_vecs = np.asarray(temporal_vecs, dtype=np.float64)
    m = temporal_vecs.shape[-2]
    if m != config.m:
        raise ValueError(f"expected {config.m} temporal pathways, got {m}")
    if m == 1:
        return temporal_vecs[..., 0, :], None
    if method == "sum":
        return temporal_vecs.sum(axis=-2), None
    if method == "concat":
        return temporal_vecs.reshape(*temporal_vecs.shape[:-2], m * config.c_t), None
    fused, cache = stcb_forward([temporal_vecs[..., i, :] for i in range(m)], params.temporal_hashes)
    norm_cache = None
    if config.post_sketch_normalize:
        fused, norm_cache = signed_sqrt_l2(fused)
    return fused, (cache, norm_cache)


def temporal_fuse_backward(cache, grad, params: PyramidParams, shape) -> np.ndarray:
    config = params.config
    m = config.m
    if m == 1:
        return grad[..., None, :]
    if config.temporal_fusion_method == "sum":
        return np.broadcast_to(grad[..., None, :], shape).copy()
    if config.temporal_fusion_method == "concat":
        return grad.reshape(shape)
    scache, norm_cache = cache
    if norm_cache is not None:
        grad = signed_sqrt_l2_backward(norm_cache, grad)
    return np.stack(stcb_backward(scache, grad, params.temporal_hashes), axis=-2)


def _top_fuse(parts, params):
    config = params.config
    method = config.top_fusion_method
    if method == "concat":
        return np.concatenate(parts, axis=-1), None
    if method == "sum":
        return sum(count_sketch(v, h) for v, h in zip(parts, params.top_hashes)), None
    fused, cache = stcb_forward(parts, params.top_hashes)
    norm_cache = None
    if config.post_sketch_normalize:
        fused, norm_cache = signed_sqrt_l2(fused)
    return fused, (cache, norm_cache)


def _top_fuse_backward(cache, grad, params, dims):
    method = params.config.top_fusion_method
    if method == "concat":
        return np.split(grad, np.cumsum(dims)[:-1], axis=-1)
    if method == "sum":
        return [count_sketch_adjoint(grad, h) for h in params.top_hashes]
    scache, norm_cache = cache
    if norm_cache is not None:
        grad = signed_sqrt_l2_backward(norm_cache, grad)
    return stcb_backward(scache, grad, params.top_hashes)


def _head_forward(layers, x):
    a1 = T.dense_forward(layers[0], x)
    r1 = T.relu_forward(a1)
    return T.dense_forward(layers[1], r1), (x, a1, r1)


def _head_backward(layers, cache, grad):
    x, a1, r1 = cache
    g_r1, gw2, gb2 = T.dense_backward(layers[1], r1, grad)
    g_x, gw1, gb1 = T.dense_backward(layers[0], x, T.relu_backward(a1, g_r1))
    return g_x, [(gw1, gb1), (gw2, gb2)]


def _unpack(sample):
    spatial = np.asarray(sample.spatial_map, dtype=np.float64)
    temporal = np.asarray(sample.temporal_vecs, dtype=np.float64)
    single = spatial.ndim == 3
    if single:
        spatial, temporal = spatial[None], temporal[None]
    return spatial, temporal, single


def forward(sample, params: PyramidParams, config: PyramidConfig | None = None):
    """Logits for a VideoSample ([K]) or a Dataset batch ([N, K]); returns (logits, caches)."""
    config = config or params.config
    spatial, temporal, single = _unpack(sample)
    if spatial.shape[1:] != (config.c_s, config.grid_h, config.grid_w) or temporal.shape[-1] != config.c_t:
        raise ValueError(f"sample shapes {spatial.shape[1:]}, {temporal.shape[1:]} do not match the config")
    chunks = select_paths(temporal, config.m)
    t_fused, t_cache = temporal_fuse(chunks, params)
    spatial_avg = T.average_pool_grid(spatial)
    caches = dict(single=single, spatial_shape=spatial.shape, temporal_shape=temporal.shape,
                  chunks_shape=chunks.shape, t_cache=t_cache)
    if config.top_fusion_method == "average_logits":
        z_s, hs = _head_forward(params.heads["spatial"], spatial_avg)
        z_t, ht = _head_forward(params.heads["temporal"], t_fused)
        p_avg = 0.5 * (np.exp(T.log_softmax(z_s)) + np.exp(T.log_softmax(z_t)))
        logits = np.log(p_avg)
        caches.update(head_spatial=hs, head_temporal=ht, z_s=z_s, z_t=z_t, p_avg=p_avg)
    else:
        if config.attention_enabled:
            att = attend_forward(spatial, t_fused, params.attention)
            attended, caches["attention"] = att.attended, att.cache
            caches["attention_weights"] = att.weights
        else:
            attended = spatial_avg
        parts = [spatial_avg, t_fused, attended]
        top, caches["top_cache"] = _top_fuse(parts, params)
        caches["top_dims"] = [p.shape[-1] for p in parts]
        logits, caches["head_main"] = _head_forward(params.heads["main"], top)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return (logits[0] if single else logits), caches


def _two_stream_logit_grads(caches, grad_logits):
    """Chain d/d(log mean softmax) back to the two head outputs."""
    p_s = np.exp(T.log_softmax(caches["z_s"]))
    p_t = np.exp(T.log_softmax(caches["z_t"]))
    g_p = grad_logits / caches["p_avg"] * 0.5

    def through_softmax(p):
        return p * (g_p - (g_p * p).sum(axis=-1, keepdims=True))

    return through_softmax(p_s), through_softmax(p_t)


def backward(caches, grad_logits, params: PyramidParams, head_grads=None):
    """Gradients of a scalar loss for every trainable array plus both inputs.

    ``head_grads`` (two-stream variant only) gives separate gradients for the
    spatial and temporal head outputs, as produced by two independent losses.
    Returns (param_grads, input_grads).
    """
    config = params.config
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if caches["single"] and grad_logits.ndim == 1:
        grad_logits = grad_logits[None]
    if grad_logits.shape != (caches["spatial_shape"][0], config.n_classes):
        raise ValueError(f"gradient shape {grad_logits.shape} does not match the cached forward pass")
    grads = {}
    spatial_shape = caches["spatial_shape"]

    def put_head(name, hgrads):
        for i, (gw, gb) in enumerate(hgrads):
            grads[f"head.{name}.{i}.weight"] = gw
            grads[f"head.{name}.{i}.bias"] = gb

    if config.top_fusion_method == "average_logits":
        g_zs, g_zt = head_grads if head_grads is not None else _two_stream_logit_grads(caches, grad_logits)
        g_avg, hg = _head_backward(params.heads["spatial"], caches["head_spatial"], g_zs)
        put_head("spatial", hg)
        g_t, hg = _head_backward(params.heads["temporal"], caches["head_temporal"], g_zt)
        put_head("temporal", hg)
        g_spatial = T.average_pool_grid_backward(spatial_shape, g_avg)
    else:
        g_top, hg = _head_backward(params.heads["main"], caches["head_main"], grad_logits)
        put_head("main", hg)
        g_avg, g_t, g_att = _top_fuse_backward(caches["top_cache"], g_top, params, caches["top_dims"])
        g_spatial = T.average_pool_grid_backward(spatial_shape, g_avg)
        if config.attention_enabled:
            g_map, g_t2, agrads = attend_backward(caches["attention"], g_att, params.attention)
            g_spatial = g_spatial + g_map
            g_t = g_t + g_t2
            grads.update({f"attention.{k}": v for k, v in agrads.items()})
        else:
            g_spatial = g_spatial + T.average_pool_grid_backward(spatial_shape, g_att)
    g_chunks = temporal_fuse_backward(caches["t_cache"], g_t, params, caches["chunks_shape"])
    g_temporal = np.zeros(caches["temporal_shape"])
    n = g_temporal.shape[-2]
    start = (n - config.m) // 2
    g_temporal[..., start:start + config.m, :] = g_chunks
    if caches["single"]:
        g_spatial, g_temporal = g_spatial[0], g_temporal[0]
    return grads, {"spatial_map": g_spatial, "temporal_vecs": g_temporal}


def loss_and_grads(batch, params: PyramidParams):
    """Training objective on a batch: (loss, logits, param_grads).

    The full pyramid uses one cross-entropy on its logits. The two-stream
    baseline trains each head with its own cross-entropy and reports their sum.
    """
    logits, caches = forward(batch, params)
    labels = batch.labels
    if params.config.top_fusion_method == "average_logits":
        l_s, g_s = T.softmax_cross_entropy(caches["z_s"], labels)
        l_t, g_t = T.softmax_cross_entropy(caches["z_t"], labels)
        grads, _ = backward(caches, np.zeros_like(logits), params, head_grads=(g_s, g_t))
        return l_s + l_t, logits, grads
    loss, g = T.softmax_cross_entropy(logits, labels)
    grads, _ = backward(caches, g, params)
    return loss, logits, grads


def predict(dataset, params: PyramidParams, batch_size: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(dataset), batch_size):
        logits, _ = forward(dataset[i:i + batch_size], params)
        preds.append(np.argmax(logits, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(dataset, params: PyramidParams, config: PyramidConfig | None = None):
    """(accuracy, confusion) with confusion[true, predicted]."""
    config = config or params.config
    preds = predict(dataset, params)
    k = config.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, preds), 1)
    acc = float(np.mean(preds == dataset.labels)) if len(preds) else float("nan")
    return acc, confusion


def train(dataset, config: PyramidConfig, train_cfg: TrainConfig, test_set=None, params=None,
          callback=None):
    """Mini-batch momentum SGD with step decay. Returns (params, metrics).

    One metrics record per epoch: epoch, loss, train_acc, test_acc (None
    without a test set), lr.
    """
    train_cfg.validate()
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if params is None:
        params = build_params(config, train_cfg.seed)
    arrays = params.arrays()
    rng = np.random.default_rng([train_cfg.seed, 7])
    n = len(dataset)
    bs = min(train_cfg.batch_size, n)
    per_epoch = -(-n // bs)
    metrics = []
    it = 0
    epoch = 0
    while it < train_cfg.iterations:
        order = rng.permutation(n)
        losses, correct, seen = [], 0, 0
        for b in range(per_epoch):
            if it >= train_cfg.iterations:
                break
            batch = dataset[order[b * bs:(b + 1) * bs]]
            where = f"iteration {it} (epoch {epoch + 1}, lr={train_cfg.lr_at(it)})"
            try:
                loss, logits, grads = loss_and_grads(batch, params)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at {where}")
                if train_cfg.weight_decay:
                    for k in grads:
                        if k.endswith("weight"):
                            grads[k] = grads[k] + train_cfg.weight_decay * arrays[k]
                T.sgd_step(arrays, grads, train_cfg.lr_at(it), train_cfg.momentum, params.velocity)
            except DivergenceError:
                raise
            except FloatingPointError as e:
                raise DivergenceError(f"{e} at {where}") from e
            losses.append(loss * len(batch))
            correct += int(np.sum(np.argmax(logits, axis=-1) == batch.labels))
            seen += len(batch)
            it += 1
        epoch += 1
        rec = {
            "epoch": epoch,
            "loss": float(np.sum(losses) / seen),
            "train_acc": correct / seen,
            "test_acc": evaluate(test_set, params)[0] if test_set is not None else None,
            "lr": train_cfg.lr_at(it - 1),
        }
        metrics.append(rec)
        log.debug("epoch %d loss %.4f train %.3f test %s", epoch, rec["loss"], rec["train_acc"], rec["test_acc"])
        if callback is not None:
            callback(rec)
    return params, metrics


# --------------------------------------------------------------------------
# Checkpoints: b"STPN", u32 version, u32 config length + JSON config,
# u32 tensor count, per tensor (u16 name length, name, u8 rank, rank x u64,
# float64 LE payload), u32 hash count, per hash (u16 name length, name,
# u64 p, u64 d, u64 seed). Hash arrays are regenerated from their seeds.

CHECKPOINT_MAGIC = b"STPN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_name(name: str) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path, params: PyramidParams) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode()
    chunks += [struct.pack("<I", len(cfg)), cfg]
    tensors = dict(params.arrays())
    tensors.update({f"velocity/{k}": v for k, v in sorted(params.velocity.items())})
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks += [_pack_name(name), struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape), arr.tobytes()]
    hashes = params.hashes()
    chunks.append(struct.pack("<I", len(hashes)))
    for name, h in hashes.items():
        chunks += [_pack_name(name), struct.pack("<QQQ", h.p, h.d, h.seed)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()


def load_checkpoint(path) -> PyramidParams:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        config = PyramidConfig(**json.loads(r.take(n).decode()))
        params = build_params(config, 0)
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: bad config block ({e})") from None
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        name = r.name()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q")
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    (n_hashes,) = r.unpack("<I")
    hashes = {}
    for _ in range(n_hashes):
        name = r.name()
        p, d, seed = r.unpack("<QQQ")
        hashes[name] = new_sketch_hash(p, d, seed)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return _assemble(params, tensors, hashes, path)


def _assemble(params: PyramidParams, tensors: dict, hashes: dict, path) -> PyramidParams:
    expected = set(params.hashes())
    if set(hashes) != expected:
        raise CheckpointError(f"{path}: hash set {sorted(hashes)} does not match config {sorted(expected)}")
    params.temporal_hashes = [hashes[f"temporal.{i}"] for i in range(len(params.temporal_hashes))]
    params.top_hashes = [hashes[f"top.{i}"] for i in range(len(params.top_hashes))]
    if params.attention is not None:
        params.attention = AttentionParams(
            conv1=params.attention.conv1, conv2=params.attention.conv2,
            spatial_hash=hashes["attention.spatial"], temporal_hash=hashes["attention.temporal"],
            method=params.attention.method)
    arrays = params.arrays()
    for name, arr in arrays.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {arr.shape}")
        arr[...] = tensors[name]
    params.velocity = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("velocity/")}
    return params
