"""Small dense kernel: affine layers, pooling, softmax, loss and SGD.

Tensors are plain float64 numpy arrays. Every forward op has a matching
backward taking the upstream gradient; there is no autodiff graph.
Grid-shaped ops accept optional leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DenseLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weight.shape}, {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


class Conv1x1Layer(DenseLayer):
    """Channel mixing applied independently at every grid cell."""


def he_init(cls, n_in: int, n_out: int, rng: np.random.Generator):
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
    return cls(weight=w, bias=np.zeros(n_out))


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"input width {x.shape[-1]} != layer input {layer.n_in}")
    return x @ layer.weight.T + layer.bias


def dense_backward(layer: DenseLayer, x, grad_out):
    """Returns (grad_input, grad_weight, grad_bias); batch axes are summed."""
    x = np.asarray(x, dtype=np.float64)
    if grad_out.shape[-1] != layer.n_out or grad_out.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"gradient shape {grad_out.shape} does not match input {x.shape}")
    x2 = x.reshape(-1, layer.n_in)
    g2 = grad_out.reshape(-1, layer.n_out)
    return grad_out @ layer.weight, g2.T @ x2, g2.sum(axis=0)


def conv1x1_forward(layer: Conv1x1Layer, x) -> np.ndarray:
    """[..., C_in, H, W] -> [..., C_out, H, W]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3 or x.shape[-3] != layer.n_in:
        raise ValueError(f"expected [..., {layer.n_in}, H, W], got {x.shape}")
    y = dense_forward(layer, np.moveaxis(x, -3, -1))
    return np.moveaxis(y, -1, -3)


def conv1x1_backward(layer: Conv1x1Layer, x, grad_out):
    gx, gw, gb = dense_backward(layer, np.moveaxis(x, -3, -1), np.moveaxis(grad_out, -3, -1))
    return np.moveaxis(gx, -1, -3), gw, gb


def relu_forward(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    return grad_out * (x > 0)


def softmax_grid(scores) -> np.ndarray:
    """Softmax over the trailing [H, W] axes."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite attention scores")
    z = scores - scores.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=(-2, -1), keepdims=True)


def softmax_grid_backward(weights, grad_out) -> np.ndarray:
    dot = (grad_out * weights).sum(axis=(-2, -1), keepdims=True)
    return weights * (grad_out - dot)


def average_pool_grid(fmap) -> np.ndarray:
    """[..., C, H, W] -> [..., C]."""
    return np.asarray(fmap, dtype=np.float64).mean(axis=(-2, -1))


def average_pool_grid_backward(shape, grad_out) -> np.ndarray:
    h, w = shape[-2:]
    return np.broadcast_to(grad_out[..., None, None] / (h * w), shape).copy()


def weighted_pool_grid(fmap, weights) -> np.ndarray:
    """out[..., c] = sum_{h,w} weights[..., h, w] * fmap[..., c, h, w]."""
    fmap = np.asarray(fmap, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[-2:] != fmap.shape[-2:]:
        raise ValueError(f"weight grid {weights.shape[-2:]} != map grid {fmap.shape[-2:]}")
    if np.any(weights < 0) or np.any(np.abs(weights.sum(axis=(-2, -1)) - 1.0) > 1e-9):
        raise ValueError("pooling weights must be nonnegative and sum to 1")
    return np.einsum("...chw,...hw->...c", fmap, weights)


def weighted_pool_grid_backward(fmap, weights, grad_out):
    """Returns (grad_map, grad_weights)."""
    g_map = grad_out[..., :, None, None] * weights[..., None, :, :]
    g_w = np.einsum("...chw,...c->...hw", fmap, grad_out)
    return g_map, g_w


def log_softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != logits.shape[:1]:
        raise ValueError(f"{len(labels)} labels for batch of {logits.shape[0]}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, velocity: dict) -> None:
    """In-place momentum SGD: v <- mu v - lr g; p <- p + v."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    for name, p in params.items():
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v - lr * grads[name]
        velocity[name] = v
        p += v
