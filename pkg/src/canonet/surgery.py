"""In-place channel edits on a graph copy.

Callers own the graph value they pass in (usually ``g.copy()``) and must call
``g.refresh()`` once a producer and all its consumers agree again.
"""

from __future__ import annotations

import numpy as np

from .graph import BN_PARAMS, Graph
from .transform import ChannelTransform, block_diag, kron_lift, rewrite_consumer


def select_channels(g: Graph, producer: str, idx) -> None:
    """Output channel ``k`` becomes old channel ``idx[k]`` (repeats allowed),
    carrying its weights, bias and owned BatchNorm entries."""
    idx = np.asarray(idx, dtype=np.int64)
    node = g.nodes[producer]
    node.tensors["weight"] = node.tensors["weight"][idx].copy()
    node.tensors["bias"] = node.tensors["bias"][idx].copy()
    bn = g.owned_bn(producer)
    if bn is not None:
        for name in BN_PARAMS:
            g.nodes[bn].tensors[name] = g.nodes[bn].tensors[name][idx].copy()


def append_channels(g: Graph, producer: str, rows, bias) -> None:
    """Append output channels; an owned BatchNorm gets neutral entries
    (mean 0, var 1, gamma 1, beta 0)."""
    node = g.nodes[producer]
    rows = np.asarray(rows, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    d = rows.shape[0]
    node.tensors["weight"] = np.concatenate([node.tensors["weight"], rows], axis=0)
    node.tensors["bias"] = np.concatenate([node.tensors["bias"], bias])
    bn = g.owned_bn(producer)
    if bn is not None:
        t = g.nodes[bn].tensors
        neutral = {"gamma": 1.0, "beta": 0.0, "running_mean": 0.0, "running_var": 1.0}
        for name in BN_PARAMS:
            t[name] = np.concatenate([t[name], np.full(d, neutral[name])])


def scale_rows(g: Graph, producer: str, s) -> None:
    node = g.nodes[producer]
    s = np.asarray(s, dtype=np.float64)
    w = node.tensors["weight"]
    node.tensors["weight"] = w * s.reshape((-1,) + (1,) * (w.ndim - 1))
    node.tensors["bias"] = node.tensors["bias"] * s


def folded_rows(g: Graph, producer: str) -> np.ndarray:
    """Per-channel affine map from the producer input to the capture site.

    Row ``i`` is ``[a_i * w_i, a_i * b_i + c_i]`` with the owned BatchNorm
    folded in (``a = gamma / sqrt(var + eps)``, ``c = beta - a * mean``), or
    ``a = 1, c = 0`` without one.  Invariant under BN-compensated scaling.
    """
    node = g.nodes[producer]
    w = node.tensors["weight"].reshape(node.tensors["weight"].shape[0], -1)
    b = node.tensors["bias"]
    bn = g.owned_bn(producer)
    if bn is None:
        return np.concatenate([w, b[:, None]], axis=1)
    t = g.nodes[bn].tensors
    eps = float(g.nodes[bn].attrs.get("eps", 1e-5))
    a = t["gamma"] / np.sqrt(t["running_var"] + eps)
    c = t["beta"] - a * t["running_mean"]
    return np.concatenate([w * a[:, None], (a * b + c)[:, None]], axis=1)


def consumer_transform(g: Graph, consumer: str, slices, m: ChannelTransform) -> ChannelTransform:
    """Transform over the consumer's whole input axis: ``m`` (lifted) on each
    slice in ``slices``, identity on every other column."""
    n_cols = g.shapes[g.nodes[consumer].inputs[0]][0]
    blocks = []
    pos = 0
    for d in sorted(slices, key=lambda s: s.offset):
        if d.offset < pos:
            raise ValueError(f"overlapping slices on {consumer}")
        if d.offset > pos:
            blocks.append(ChannelTransform.identity(d.offset - pos))
        blocks.append(kron_lift(m, d.hw))
        pos = d.offset + d.width
    if pos > n_cols:
        raise ValueError(f"slice past the input axis of {consumer}")
    if pos < n_cols:
        blocks.append(ChannelTransform.identity(n_cols - pos))
    return block_diag(blocks)


def rewrite_consumers(g: Graph, paths, m: ChannelTransform, skip=()) -> list[str]:
    """Apply ``W <- W @ M`` on every consumer slice in ``paths``.

    Returns the consumers touched.  ``skip`` names consumers to leave alone
    (fault injection only).
    """
    if m.is_identity():
        return []
    by_consumer: dict[str, list] = {}
    for d in paths:
        by_consumer.setdefault(d.consumer, []).append(d)
    touched = []
    for consumer, slices in by_consumer.items():
        if consumer in skip:
            continue
        full = consumer_transform(g, consumer, slices, m)
        node = g.nodes[consumer]
        node.tensors["weight"] = rewrite_consumer(node.tensors["weight"], full)
        touched.append(consumer)
    return touched
