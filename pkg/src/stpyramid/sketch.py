"""Count Sketch projections and compact multi-way bilinear fusion.

The fused representation of m feature vectors is the inverse DFT of the
element-wise product of the DFTs of their count sketches. For two inputs this
equals the count sketch of the vectorised outer product under the combined
hash ``(hA[i] + hB[j]) mod d`` with sign ``sA[i] * sB[j]``.

All functions accept leading batch axes: a vector argument of length p may be
any array of shape ``[..., p]``.

Hashes are drawn from numpy's PCG64 generator (O'Neill 2014), seeded with the
64-bit hash seed, so the same (p, d, seed) yields the same hash on every
platform. Bucket indices are stored 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAG_TOL = 1e-9


@dataclass(frozen=True)
class SketchHash:
    """Fixed random projection R^p -> R^d for one feature pathway."""

    p: int
    d: int
    seed: int | None
    h: np.ndarray = field(repr=False, compare=False)
    s: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.int64)
        s = np.asarray(self.s, dtype=np.int64)
        if h.shape != (self.p,) or s.shape != (self.p,):
            raise ValueError(f"hash arrays must have length p={self.p}")
        if self.p > 0 and (h.min() < 0 or h.max() >= self.d):
            raise ValueError(f"bucket indices must lie in [0, {self.d})")
        if not (np.abs(s) == 1).all():
            raise ValueError("signs must be +1 or -1")
        h.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "s", s)

    def __eq__(self, other):
        if not isinstance(other, SketchHash):
            return NotImplemented
        return (self.p, self.d, self.seed) == (other.p, other.d, other.seed) and \
            np.array_equal(self.h, other.h) and np.array_equal(self.s, other.s)

    __hash__ = None

    @classmethod
    def from_arrays(cls, h, s, d: int) -> "SketchHash":
        """Build a hash with explicit index/sign maps (no seed)."""
        h = np.asarray(h, dtype=np.int64)
        return cls(p=len(h), d=int(d), seed=None, h=h, s=np.asarray(s, dtype=np.int64))


def new_sketch_hash(p: int, d: int, seed: int) -> SketchHash:
    """Draw h uniformly from [0, d) and s uniformly from {-1, +1}."""
    if p < 1 or d < 1:
        raise ValueError(f"sketch dimensions must be positive, got p={p}, d={d}")
    seed = int(seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    h = rng.integers(0, d, size=p)
    s = 2 * rng.integers(0, 2, size=p) - 1
    return SketchHash(p=int(p), d=int(d), seed=seed, h=h, s=s)


def count_sketch(v, hash: SketchHash) -> np.ndarray:
    """out[..., k] = sum over j with h[j] == k of s[j] * v[..., j]."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (hash.p,):
        raise ValueError(f"expected trailing dimension {hash.p}, got shape {v.shape}")
    if v.ndim == 1:
        return np.bincount(hash.h, weights=v * hash.s, minlength=hash.d)
    lead = v.shape[:-1]
    flat = v.reshape(-1, hash.p) * hash.s
    n = flat.shape[0]
    idx = hash.h[None, :] + hash.d * np.arange(n)[:, None]
    out = np.bincount(idx.ravel(), weights=flat.ravel(), minlength=n * hash.d)
    return out.reshape(*lead, hash.d)


def count_sketch_adjoint(g, hash: SketchHash) -> np.ndarray:
    """Transpose of count_sketch: out[..., j] = s[j] * g[..., h[j]]."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1:] != (hash.d,):
        raise ValueError(f"expected trailing dimension {hash.d}, got shape {g.shape}")
    return g[..., hash.h] * hash.s


def _real_part(z: np.ndarray) -> np.ndarray:
    out = z.real
    scale = max(1.0, float(np.abs(out).max(initial=0.0)))
    resid = float(np.abs(z.imag).max(initial=0.0))
    if resid > IMAG_TOL * scale:
        raise FloatingPointError(f"inverse DFT left imaginary residue {resid:.3g}")
    return np.ascontiguousarray(out)


def circular_convolution(a, b) -> np.ndarray:
    """out[k] = sum_j a[j] * b[(k - j) mod d], computed in the frequency domain."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    if a.shape[-1] < 1:
        raise ValueError("empty vectors")
    return _real_part(np.fft.ifft(np.fft.fft(a) * np.fft.fft(b)))


def circular_convolution_direct(a, b) -> np.ndarray:
    """O(d^2) reference for circular_convolution (1-D only)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = len(a)
    if b.shape != (d,):
        raise ValueError(f"length mismatch: {d} vs {b.shape}")
    j = np.arange(d)
    out = np.empty(d)
    for k in range(d):
        out[k] = np.dot(a, b[(k - j) % d])
    return out


@dataclass
class StcbCache:
    sketches: list
    spectra: list
    product: np.ndarray


def _check_hashes(hashes) -> int:
    if len(hashes) < 2:
        raise ValueError(f"compact bilinear fusion needs at least 2 pathways, got {len(hashes)}")
    dims = {hs.d for hs in hashes}
    if len(dims) != 1:
        raise ValueError(f"all pathway hashes must share d, got {sorted(dims)}")
    seeds = [hs.seed for hs in hashes if hs.seed is not None]
    if len(seeds) != len(set(seeds)):
        raise ValueError("pathway hashes must use distinct seeds")
    return dims.pop()


def stcb_forward(vectors, hashes) -> tuple[np.ndarray, StcbCache]:
    """Fuse m >= 2 pathways into one length-d vector.

    Inputs may carry matching (or broadcastable) leading batch axes.
    """
    if len(vectors) != len(hashes):
        raise ValueError(f"{len(vectors)} vectors but {len(hashes)} hashes")
    _check_hashes(hashes)
    d = hashes[0].d
    sketches = [count_sketch(v, hs) for v, hs in zip(vectors, hashes)]
    # real inputs: the half spectrum determines the full DFT and the inverse is real
    shape = sketches[0].shape
    if all(sk.shape == shape for sk in sketches[1:]):
        spectra = list(np.fft.rfft(np.array(sketches)))  # one transform call for all pathways
    else:
        spectra = [np.fft.rfft(sk) for sk in sketches]
    product = spectra[0]
    for f in spectra[1:]:
        product = product * f
    fused = np.fft.irfft(product, n=d)
    return fused, StcbCache(sketches=sketches, spectra=spectra, product=product)


def _partial_products(spectra):
    """prod_{k != i} spectra[k] for every i, without division."""
    m = len(spectra)
    if m == 2:
        return [spectra[1], spectra[0]]
    prefix = [None] * m
    suffix = [None] * m
    acc = 1.0
    for i in range(m):
        prefix[i] = acc
        acc = acc * spectra[i]
    acc = 1.0
    for i in reversed(range(m)):
        suffix[i] = acc
        acc = acc * spectra[i]
    return [prefix[i] * suffix[i] for i in range(m)]


def stcb_backward(cache: StcbCache, grad_fused, hashes) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. each input pathway of stcb_forward."""
    if len(hashes) != len(cache.spectra):
        raise ValueError("cache was built for a different number of pathways")
    grad_fused = np.asarray(grad_fused, dtype=np.float64)
    if grad_fused.shape[-1] != hashes[0].d:
        raise ValueError(f"gradient length {grad_fused.shape[-1]} != d={hashes[0].d}")
    d = hashes[0].d
    g_hat = np.fft.rfft(grad_fused)
    grads = []
    for hs, sk, others in zip(hashes, cache.sketches, _partial_products(cache.spectra)):
        # undo broadcasting over leading axes before leaving the frequency domain
        g_spec = _sum_to_shape(g_hat * np.conj(others), sk.shape)
        g_sketch = np.fft.irfft(g_spec, n=d)
        grads.append(count_sketch_adjoint(g_sketch, hs))
    return grads


def _sum_to_shape(x: np.ndarray, shape) -> np.ndarray:
    if x.shape == tuple(shape):
        return x
    extra = x.ndim - len(shape)
    x = x.sum(axis=tuple(range(extra))) if extra > 0 else x
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    return x.sum(axis=axes, keepdims=True) if axes else x


def combined_outer_hash(hA: SketchHash, hB: SketchHash) -> SketchHash:
    """Hash of vec(x y^T) induced by the pathway hashes, row-major (i outer, j inner)."""
    if hA.d != hB.d:
        raise ValueError(f"output dimensions differ: {hA.d} vs {hB.d}")
    h = (hA.h[:, None] + hB.h[None, :]) % hA.d
    s = hA.s[:, None] * hB.s[None, :]
    return SketchHash.from_arrays(h.ravel(), s.ravel(), hA.d)


def explicit_bilinear(x, y) -> np.ndarray:
    """vec(x y^T), row-major. Test and benchmark oracle."""
    return np.outer(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)).ravel()


def signed_sqrt_l2(z, eps: float = 1e-12):
    """Optional post-sketch normalisation: sign(z) sqrt|z|, then unit L2 norm.

    Returns the normalised vector and a cache for the backward pass.
    """
    z = np.asarray(z, dtype=np.float64)
    r = np.sqrt(np.abs(z) + eps)
    u = np.sign(z) * r
    norm = np.sqrt((u * u).sum(axis=-1, keepdims=True) + eps)
    return u / norm, (z, r, u, norm)


def signed_sqrt_l2_backward(cache, grad):
    z, r, u, norm = cache
    y = u / norm
    g_u = (grad - y * (grad * y).sum(axis=-1, keepdims=True)) / norm
    return g_u * 0.5 / r
