"""Spatiotemporal attention pooling.

At every grid cell the spatial feature column is fused with the (fused)
temporal vector; two 1x1 convolutions with a ReLU in between turn the fused
map into one score per cell, a softmax over the grid turns scores into pooling
weights, and the spatial map is pooled with those weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorops as T
from .sketch import (
    SketchHash,
    count_sketch,
    count_sketch_adjoint,
    new_sketch_hash,
    stcb_backward,
    stcb_forward,
)

ATTENTION_INPUTS = ("stcb", "concat", "sum", "temporal")


@dataclass
class AttentionParams:
    conv1: T.Conv1x1Layer
    conv2: T.Conv1x1Layer
    spatial_hash: SketchHash
    temporal_hash: SketchHash
    method: str = "stcb"

    def __post_init__(self):
        if self.method not in ATTENTION_INPUTS:
            raise ValueError(f"unknown attention input {self.method!r}")
        if self.spatial_hash.d != self.temporal_hash.d:
            raise ValueError("attention hashes must share their output dimension")
        if self.conv1.n_in != self.feature_dim:
            raise ValueError(f"conv1 expects {self.conv1.n_in} channels, fused map has {self.feature_dim}")
        if self.conv2.n_in != self.conv1.n_out or self.conv2.n_out != 1:
            raise ValueError("conv2 must map conv1 outputs to a single score channel")

    @property
    def feature_dim(self) -> int:
        if self.method == "concat":
            return self.spatial_hash.p + self.temporal_hash.p
        return self.spatial_hash.d

    def arrays(self) -> dict:
        return {
            "conv1.weight": self.conv1.weight, "conv1.bias": self.conv1.bias,
            "conv2.weight": self.conv2.weight, "conv2.bias": self.conv2.bias,
        }


@dataclass
class AttentionOutput:
    attended: np.ndarray
    weights: np.ndarray
    cache: dict


def init_attention(c_s: int, c_t: int, d_att: int, n_hidden: int, seeds, rng, method="stcb"):
    hs = new_sketch_hash(c_s, d_att, seeds[0])
    ht = new_sketch_hash(c_t, d_att, seeds[1])
    n_in = c_s + c_t if method == "concat" else d_att
    conv1 = T.he_init(T.Conv1x1Layer, n_in, n_hidden, rng)
    # zero score layer: attention starts out as plain average pooling
    conv2 = T.Conv1x1Layer(np.zeros((1, n_hidden)), np.zeros(1))
    return AttentionParams(conv1=conv1, conv2=conv2, spatial_hash=hs, temporal_hash=ht, method=method)


def _fuse_cells(cells, tvec, params):
    """cells [..., H, W, C_s], tvec [..., 1, 1, C_t] -> features [..., H, W, F]."""
    hs, ht = params.spatial_hash, params.temporal_hash
    if params.method == "stcb":
        return stcb_forward([cells, tvec], [hs, ht])
    if params.method == "concat":
        tvec = np.broadcast_to(tvec, cells.shape[:-1] + tvec.shape[-1:])
        return np.concatenate([cells, tvec], axis=-1), None
    if params.method == "sum":
        return count_sketch(cells, hs) + count_sketch(tvec, ht), None
    return np.broadcast_to(count_sketch(tvec, ht), cells.shape[:-1] + (ht.d,)), None


def _fuse_cells_backward(cache, g, params, c_s):
    hs, ht = params.spatial_hash, params.temporal_hash
    if params.method == "stcb":
        return stcb_backward(cache, g, [hs, ht])
    if params.method == "concat":
        return g[..., :c_s], g[..., c_s:]
    if params.method == "sum":
        return count_sketch_adjoint(g, hs), count_sketch_adjoint(g, ht)
    return np.zeros(g.shape[:-1] + (c_s,)), count_sketch_adjoint(g, ht)


def attend_forward(spatial_map, temporal_vec, params: AttentionParams) -> AttentionOutput:
    """spatial_map [..., C_s, H, W], temporal_vec [..., C_t] -> pooled [..., C_s]."""
    spatial_map = np.asarray(spatial_map, dtype=np.float64)
    temporal_vec = np.asarray(temporal_vec, dtype=np.float64)
    c_s, h, w = spatial_map.shape[-3:]
    if c_s != params.spatial_hash.p or temporal_vec.shape[-1] != params.temporal_hash.p:
        raise ValueError(
            f"inputs ({c_s}, {temporal_vec.shape[-1]}) do not match attention "
            f"({params.spatial_hash.p}, {params.temporal_hash.p})"
        )
    if spatial_map.shape[:-3] != temporal_vec.shape[:-1]:
        raise ValueError("spatial and temporal batch shapes differ")
    cells = np.moveaxis(spatial_map, -3, -1)
    # one temporal column per sample, broadcast across the grid inside the fusion
    tvec = temporal_vec[..., None, None, :]
    fused, fcache = _fuse_cells(cells, tvec, params)
    fmap = np.moveaxis(fused, -1, -3)
    a1 = T.conv1x1_forward(params.conv1, fmap)
    r1 = T.relu_forward(a1)
    scores = T.conv1x1_forward(params.conv2, r1)[..., 0, :, :]
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite attention scores")
    weights = T.softmax_grid(scores)
    attended = T.weighted_pool_grid(spatial_map, weights)
    cache = dict(spatial_map=spatial_map, fcache=fcache, fmap=fmap, a1=a1, r1=r1, weights=weights)
    return AttentionOutput(attended=attended, weights=weights, cache=cache)


def attend_backward(cache: dict, grad_attended, params: AttentionParams):
    """Returns (grad_spatial_map, grad_temporal_vec, grad_params)."""
    spatial_map, weights = cache["spatial_map"], cache["weights"]
    grad_attended = np.asarray(grad_attended, dtype=np.float64)
    if grad_attended.shape != spatial_map.shape[:-2]:
        raise ValueError(f"gradient shape {grad_attended.shape} does not match cache {spatial_map.shape[:-2]}")
    c_s = spatial_map.shape[-3]
    g_map, g_w = T.weighted_pool_grid_backward(spatial_map, weights, grad_attended)
    g_scores = T.softmax_grid_backward(weights, g_w)
    g_r1, gw2, gb2 = T.conv1x1_backward(params.conv2, cache["r1"], g_scores[..., None, :, :])
    g_a1 = T.relu_backward(cache["a1"], g_r1)
    g_fmap, gw1, gb1 = T.conv1x1_backward(params.conv1, cache["fmap"], g_a1)
    g_cells, g_tvec = _fuse_cells_backward(cache["fcache"], np.moveaxis(g_fmap, -3, -1), params, c_s)
    g_map = g_map + np.moveaxis(g_cells, -1, -3)
    g_temporal = g_tvec.sum(axis=(-3, -2))
    grads = {"conv1.weight": gw1, "conv1.bias": gb1, "conv2.weight": gw2, "conv2.bias": gb2}
    return g_map, g_temporal, grads
