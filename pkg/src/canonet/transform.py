"""Sparse channel transforms.

A :class:`ChannelTransform` ``M`` of shape ``c_before x c_after`` relates two
layouts of one activation by ``y_before = M @ y_after``.  Rewriting every
consumer weight as ``W <- W @ M`` keeps the network function, since
``W @ y_before = (W @ M) @ y_after``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TransformError(ValueError):
    pass


class GroupRestrictionError(TransformError):
    """The transform mixes channels across the groups of a grouped consumer."""


@dataclass(frozen=True)
class ChannelTransform:
    c_before: int
    c_after: int
    entries: tuple = ()

    def __post_init__(self):
        if self.c_before < 0 or self.c_after < 0:
            raise TransformError("transform dimensions must be non-negative")
        canon = []
        seen = set()
        for r, c, v in self.entries:
            r, c, v = int(r), int(c), float(v)
            if not (0 <= r < self.c_before and 0 <= c < self.c_after):
                raise TransformError(f"entry ({r}, {c}) outside {self.c_before}x{self.c_after}")
            if not math.isfinite(v):
                raise TransformError(f"entry ({r}, {c}) is not finite")
            if (r, c) in seen:
                raise TransformError(f"duplicate entry ({r}, {c})")
            seen.add((r, c))
            canon.append((r, c, v))
        canon.sort(key=lambda e: (e[0], e[1]))
        object.__setattr__(self, "entries", tuple(canon))

    # -- constructors ------------------------------------------------------
    @classmethod
    def identity(cls, n: int) -> "ChannelTransform":
        return cls(n, n, tuple((i, i, 1.0) for i in range(n)))

    @classmethod
    def from_dense(cls, a) -> "ChannelTransform":
        a = np.asarray(a, dtype=np.float64)
        rows, cols = np.nonzero(a)
        return cls(a.shape[0], a.shape[1], tuple(zip(rows.tolist(), cols.tolist(),
                                                     a[rows, cols].tolist())))

    @classmethod
    def from_perm_scale(cls, perm, scales=None) -> "ChannelTransform":
        """``M = P^T D^-1`` for ``y_after[k] = s_k * y_before[perm[k]]``."""
        n = len(perm)
        if sorted(int(p) for p in perm) != list(range(n)):
            raise TransformError("perm is not a bijection")
        scales = np.ones(n) if scales is None else np.asarray(scales, dtype=np.float64)
        if scales.shape != (n,) or np.any(scales <= 0):
            raise TransformError("scales must be positive, one per channel")
        return cls(n, n, tuple((int(perm[k]), k, 1.0 / float(scales[k])) for k in range(n)))

    # -- views -------------------------------------------------------------
    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.c_before, self.c_after))
        for r, c, v in self.entries:
            out[r, c] = v
        return out

    def is_identity(self) -> bool:
        return (self.c_before == self.c_after == len(self.entries)
                and all(r == c and v == 1.0 for r, c, v in self.entries))

    def to_json(self) -> dict:
        return {"c_before": self.c_before, "c_after": self.c_after,
                "entries": [[r, c, v] for r, c, v in self.entries]}

    @classmethod
    def from_json(cls, obj) -> "ChannelTransform":
        return cls(int(obj["c_before"]), int(obj["c_after"]),
                   tuple((int(r), int(c), float(v)) for r, c, v in obj["entries"]))


def apply_to_activation(m: ChannelTransform, y_after) -> np.ndarray:
    """``y_before[i] = sum_j M[i, j] y_after[j]`` at every spatial position."""
    y = np.asarray(y_after, dtype=np.float64)
    if y.ndim == 0 or y.shape[0] != m.c_after:
        raise TransformError(f"activation has {y.shape[:1]} channels, transform expects "
                             f"{m.c_after}")
    out = np.zeros((m.c_before,) + y.shape[1:])
    for r, c, v in m.entries:
        out[r] += v * y[c]
    return out


def compose(m1: ChannelTransform, m2: ChannelTransform) -> ChannelTransform:
    """``M1 @ M2``: apply ``m2`` first when mapping after-layout to before-layout."""
    if m1.c_after != m2.c_before:
        raise TransformError(f"cannot compose {m1.c_before}x{m1.c_after} with "
                             f"{m2.c_before}x{m2.c_after}")
    by_row: dict[int, list[tuple[int, float]]] = {}
    for r, c, v in m2.entries:
        by_row.setdefault(r, []).append((c, v))
    acc: dict[tuple[int, int], float] = {}
    for r, k, v in m1.entries:
        for c, w in by_row.get(k, ()):
            acc[(r, c)] = acc.get((r, c), 0.0) + v * w
    return ChannelTransform(m1.c_before, m2.c_after,
                            tuple((r, c, v) for (r, c), v in acc.items() if v != 0.0))


def block_diag(blocks) -> ChannelTransform:
    blocks = list(blocks)
    if not blocks:
        raise TransformError("block_diag needs at least one block")
    entries = []
    rb = cb = 0
    for b in blocks:
        entries.extend((r + rb, c + cb, v) for r, c, v in b.entries)
        rb += b.c_before
        cb += b.c_after
    return ChannelTransform(rb, cb, tuple(entries))


def kron_lift(m: ChannelTransform, hw: int) -> ChannelTransform:
    """``M kron I_hw``: the transform seen by a consumer after channel-major Flatten."""
    if hw < 1:
        raise TransformError("hw must be positive")
    if hw == 1:
        return m
    return ChannelTransform(m.c_before * hw, m.c_after * hw,
                            tuple((r * hw + k, c * hw + k, v)
                                  for r, c, v in m.entries for k in range(hw)))


def group_restrict(m: ChannelTransform, groups: int) -> ChannelTransform:
    """Check that ``m`` is block-diagonal over ``groups`` equal channel groups.

    Returns ``m`` unchanged when it is; raises :class:`GroupRestrictionError`
    when any nonzero entry crosses a group boundary.
    """
    if groups < 1 or m.c_before % groups or m.c_after % groups:
        raise GroupRestrictionError(f"{m.c_before}x{m.c_after} does not split into "
                                    f"{groups} equal groups")
    bb, ba = m.c_before // groups, m.c_after // groups
    for r, c, v in m.entries:
        if v != 0.0 and r // bb != c // ba:
            raise GroupRestrictionError(f"entry ({r}, {c}) mixes group {r // bb} into {c // ba}")
    return m


def rewrite_consumer(w, m: ChannelTransform, path=None, groups: int = 1) -> np.ndarray:
    """``W <- W @ M`` on the consumer input slice named by ``path``.

    ``w`` is a Conv2d kernel ``(C_out, C_in/groups, kh, kw)`` or a Linear
    matrix ``(M, N)``; axis 1 is the input axis in both cases.  ``path`` needs
    ``offset`` and ``hw`` attributes (a :class:`~canonet.structure.PathDescriptor`);
    ``None`` means the whole input axis.  Columns outside the slice, the output
    axis and the bias are untouched.  For grouped consumers ``m`` must respect
    the groups and the kernel is rewritten group by group.
    """
    w = np.asarray(w, dtype=np.float64)
    if m.is_identity():
        return w.copy()
    offset = 0 if path is None else int(path.offset)
    hw = 1 if path is None else int(path.hw)
    if groups > 1:
        if path is not None and (offset or hw != 1):
            raise TransformError("grouped consumers accept whole-axis transforms only")
        group_restrict(m, groups)
        rows_g = w.shape[0] // groups
        bb, ba = m.c_before // groups, m.c_after // groups
        if w.shape[1] != bb:
            raise TransformError(f"grouped kernel has {w.shape[1]} inputs per group, "
                                 f"transform expects {bb}")
        dense = m.to_dense()
        parts = []
        for gi in range(groups):
            block = dense[gi * bb:(gi + 1) * bb, gi * ba:(gi + 1) * ba]
            wg = w[gi * rows_g:(gi + 1) * rows_g]
            parts.append(np.einsum("oc...,cd->od...", wg, block))
        return np.concatenate(parts, axis=0)
    if path is None:
        if m.c_before == 0 or w.shape[1] % m.c_before:
            raise TransformError(f"input axis of length {w.shape[1]} is not a multiple of "
                                 f"{m.c_before} channels")
        hw = w.shape[1] // m.c_before
    width = m.c_before * hw
    if offset < 0 or offset + width > w.shape[1]:
        raise TransformError(f"slice [{offset}, {offset + width}) outside input axis of "
                             f"length {w.shape[1]}")
    if path is not None and getattr(path, "channels", m.c_before) != m.c_before:
        raise TransformError(f"path carries {path.channels} channels, transform expects "
                             f"{m.c_before}")
    seg = w[:, offset:offset + width]
    tail = seg.shape[2:]
    seg = seg.reshape(seg.shape[0], m.c_before, hw, -1)
    new = np.einsum("ochr,cd->odhr", seg, m.to_dense())
    new = new.reshape((w.shape[0], m.c_after * hw) + tail)
    return np.concatenate([w[:, :offset], new, w[:, offset + width:]], axis=1)
