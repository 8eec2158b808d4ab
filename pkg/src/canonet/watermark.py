"""Index-ordered projection watermark.

The message ``b`` (``n`` bits) is read from a layer weight ``v`` (flattened in
``(out, in, kh, kw)`` order) as ``step(X @ v)`` where ``X`` is an ``n x m``
standard normal matrix regenerated from the key seed and ``step(x) = 1`` iff
``x > 0``.  The read depends on parameter positions, which is exactly what a
channel permutation or widening disturbs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Graph
from .rng import Rng

MARGIN = 0.01


class WatermarkError(RuntimeError):
    pass


@dataclass
class WatermarkKey:
    layer: str
    n: int
    seed: int
    m: int
    bits: np.ndarray
    X: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        return {"seed": self.seed, "layer": self.layer, "n": self.n, "m": self.m,
                "bits": [int(b) for b in self.bits],
                "note": "projection regenerated from seed; not serialized"}

    @classmethod
    def from_json(cls, obj) -> "WatermarkKey":
        key = _make_key(obj["layer"], int(obj["n"]), int(obj["seed"]), int(obj["m"]))
        bits = np.asarray(obj["bits"], dtype=np.int64)
        if not np.array_equal(bits, key.bits):
            raise WatermarkError("message bits do not match the key seed")
        return key


def _make_key(layer: str, n: int, seed: int, m: int) -> WatermarkKey:
    if n < 1:
        raise WatermarkError("a key needs at least one bit")
    rng = Rng(seed)
    x = rng.spawn("projection").normal((n, m))
    bits = rng.spawn("message").bits(n)
    return WatermarkKey(layer, n, seed, m, bits, x)


def _weight(g: Graph, layer: str) -> np.ndarray:
    if layer not in g.nodes:
        raise WatermarkError(f"layer {layer!r} not in graph")
    node = g.nodes[layer]
    if not node.is_linear:
        raise WatermarkError(f"layer {layer!r} is a {node.kind}, not Conv2d/Linear")
    return node.tensors["weight"]


def keygen(g: Graph, layer: str, n: int, seed: int) -> WatermarkKey:
    return _make_key(layer, n, seed, int(_weight(g, layer).size))


@dataclass
class Extraction:
    similarity: float
    degraded: bool = False
    reason: str | None = None


def similarity_of(v: np.ndarray, key: WatermarkKey) -> Extraction:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    degraded, reason = False, None
    if v.size != key.m:
        degraded = True
        reason = f"incompatible shape: {v.size} parameters, key expects {key.m}"
        v = np.concatenate([v, np.zeros(max(0, key.m - v.size))])[:key.m]
    read = (key.X @ v > 0).astype(np.int64)
    return Extraction(float(np.mean(read == key.bits)), degraded, reason)


def extract_similarity(g: Graph, key: WatermarkKey) -> Extraction:
    """Bit-match fraction of the layer's read.  A layer whose size no longer
    matches the key is read truncated or zero-padded and flagged degraded."""
    return similarity_of(_weight(g, key.layer), key)


def margins(v: np.ndarray, key: WatermarkKey) -> np.ndarray:
    """Signed margins ``(2b - 1) * (X @ v)``; all positive means every bit reads right."""
    return (2 * key.bits - 1) * (key.X @ np.asarray(v, dtype=np.float64).reshape(-1))


def embed(g: Graph, key: WatermarkKey, max_iters: int = 500, step_size: float = 1.0,
          margin: float = MARGIN) -> tuple[Graph, int]:
    """Nudge the layer weight until every bit reads right with ``margin``.

    Each iteration moves ``v`` by ``step * X^T (s * shortfall) / m`` where
    ``s = 2b - 1`` and ``shortfall = max(0, 2 margin - s * (X v))``.  Returns
    the new graph and the iteration count (0 when nothing had to change).
    """
    w = _weight(g, key.layer)
    if w.size != key.m:
        raise WatermarkError(f"key expects {key.m} parameters, layer has {w.size}")
    v = w.reshape(-1).copy()
    s = 2 * key.bits - 1
    for it in range(max_iters + 1):
        z = s * (key.X @ v)
        if np.all(z >= margin):
            break
        if it == max_iters:
            raise WatermarkError(f"embedding did not converge in {max_iters} iterations "
                                 f"(worst margin {z.min():.3g})")
        short = np.maximum(0.0, 2 * margin - z)
        v = v + step_size * (key.X.T @ (s * short)) / key.m
    if it == 0:
        return g, 0
    out = g.copy()
    out.nodes[key.layer].tensors["weight"] = v.reshape(w.shape)
    out.refresh()
    return out, it
