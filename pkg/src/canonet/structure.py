"""Producer/consumer analysis: eligible producer edges, consumer paths, merge groups.

A *producer* is a Conv2d or Linear node; its output edge carries the channels
an attack may widen.  A *consumer* is the next Conv2d/Linear reached through
channel-preserving nodes (BatchNorm, ReLU, AvgPoolGlobal), Add, Cat and
Flatten.  Every consumer slice is described by a :class:`PathDescriptor`.

Merge groups come from a layout pass: each tensor is a list of segments
``(bus, channels, hw)`` where ``bus`` is the producer (or ``@input``) that
defined those channels.  Add unions the buses of corresponding segments of its
two operands, so producers whose channels are summed share one group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph

INPUT_BUS = "@input"
PASS_THROUGH = ("ReLU", "AvgPoolGlobal")


@dataclass(frozen=True)
class PathDescriptor:
    """Where a producer's channels land on a consumer's input axis.

    The slice starts at column ``offset`` of the consumer's input axis (input
    channel for Conv2d, input feature for Linear) and spans ``channels * hw``
    columns.  ``hw > 1`` means a Flatten was crossed, so a transform on the
    producer's channels acts on this slice as ``M kron I_hw``.  ``via`` lists
    the structural nodes crossed: ``("add", node, port)``, ``("cat", node,
    offset)`` or ``("flatten", node, hw)``.
    """

    consumer: str
    offset: int
    channels: int
    hw: int = 1
    via: tuple = ()

    @property
    def width(self) -> int:
        return self.channels * self.hw

    @property
    def key(self) -> tuple[str, int]:
        return (self.consumer, self.offset)


@dataclass
class ProducerEdge:
    edge: str
    channels: int
    consumers: list[PathDescriptor]
    bn: str | None
    eligible: bool = True
    reason: str | None = None


@dataclass
class MergeGroup:
    members: tuple[str, ...]
    channels: int
    consumers: tuple[PathDescriptor, ...]
    eligible: bool = True
    reason: str | None = None

    def __contains__(self, nid) -> bool:
        return nid in self.members


class _UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, x: str) -> str:
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller id becomes the root, so the result ignores union order
            lo, hi = sorted((ra, rb))
            self.parent[hi] = lo


def consumer_paths(g: Graph, producer: str) -> tuple[list[PathDescriptor], str | None]:
    """Consumer slices reachable from ``producer`` and the first barrier met.

    Entries are deduplicated by ``(consumer, offset)``: Add(x, x) reaching one
    consumer slice gives one entry, Cat(x, x) gives two.
    """
    found: dict[tuple[str, int], PathDescriptor] = {}
    barrier = None
    channels = g.shapes[producer][0]
    owned = g.owned_bn(producer)
    stack = [(dst, port, 0, 1, ()) for dst, port in reversed(g.consumers[producer])]
    while stack:
        nid, port, offset, hw, via = stack.pop()
        node = g.nodes[nid]
        kind = node.kind
        if kind in ("Conv2d", "Linear"):
            if kind == "Conv2d" and node.groups > 1:
                barrier = barrier or f"grouped conv consumer {nid}"
                continue
            desc = PathDescriptor(nid, offset, channels, hw, via)
            found.setdefault(desc.key, desc)
            continue
        if kind == "Output":
            barrier = barrier or "reaches model output"
            continue
        if kind == "BatchNorm":
            if nid != owned:
                barrier = barrier or f"batch norm {nid} not owned by one producer"
                continue
        elif kind == "Add":
            via = via + (("add", nid, port),)
        elif kind == "Cat":
            offset += sum(g.shapes[src][0] for src in node.inputs[:port])
            via = via + (("cat", nid, offset),)
        elif kind == "Flatten":
            shape = g.shapes[node.inputs[0]]
            spatial = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            offset *= spatial
            hw *= spatial
            via = via + (("flatten", nid, spatial),)
        elif kind not in PASS_THROUGH:
            barrier = barrier or f"unsupported node {nid}"
            continue
        for dst, p in reversed(g.consumers[nid]):
            stack.append((dst, p, offset, hw, via))
    ordered = sorted(found.values(), key=lambda d: (g.position[d.consumer], d.offset))
    return ordered, barrier


def _layouts(g: Graph):
    """Segment layout of every tensor, plus Add unions and barrier taints."""
    uf = _UnionFind()
    taint: dict[str, str] = {INPUT_BUS: "bound to the model input"}
    layout: dict[str, list[tuple[str, int, int]]] = {}

    def mark(segments, reason):
        for bus, _, _ in segments:
            taint.setdefault(bus, reason)

    for nid in g.order:
        node = g.nodes[nid]
        kind = node.kind
        ins = [layout[src] for src in node.inputs]
        if kind == "Input":
            out = [(INPUT_BUS, g.shapes[nid][0], 1)]
        elif kind in ("Conv2d", "Linear"):
            uf.find(nid)
            if kind == "Conv2d" and node.groups > 1:
                mark(ins[0], f"consumed by grouped conv {nid}")
                taint.setdefault(nid, "grouped conv producer")
            out = [(nid, g.shapes[nid][0], 1)]
        elif kind == "BatchNorm":
            src = node.inputs[0]
            if g.nodes[src].is_linear and g.owned_bn(src) == nid:
                out = ins[0]
            else:
                mark(ins[0], f"batch norm {nid} not owned by one producer")
                out = ins[0]
        elif kind in PASS_THROUGH:
            out = ins[0]
        elif kind == "Flatten":
            shape = g.shapes[node.inputs[0]]
            spatial = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            out = [(bus, c, hw * spatial) for bus, c, hw in ins[0]]
        elif kind == "Cat":
            out = [seg for part in ins for seg in part]
        elif kind == "Add":
            a, b = ins
            if len(a) == len(b) and all(sa[1:] == sb[1:] for sa, sb in zip(a, b)):
                for sa, sb in zip(a, b):
                    uf.union(sa[0], sb[0])
            else:
                mark(a + b, f"add {nid} mixes differently segmented operands")
            out = a
        elif kind == "Output":
            mark(ins[0], "reaches model output")
            out = ins[0]
        else:
            mark(ins[0] if ins else [], f"unsupported node {nid}")
            out = ins[0]
        layout[nid] = out
    return uf, taint


def merge_groups(g: Graph) -> list[MergeGroup]:
    """Connected components of the Add-alignment relation over producers,
    ordered by the topological position of their first member."""
    uf, taint = _layouts(g)
    producers = g.linear_nodes()
    members: dict[str, list[str]] = {}
    for p in producers:
        members.setdefault(uf.find(p), []).append(p)
    input_root = uf.find(INPUT_BUS)
    groups = []
    for root, mem in members.items():
        mem.sort(key=g.position.__getitem__)
        buses = [b for b in uf.parent if uf.find(b) == root]
        reasons = sorted(taint[b] for b in buses if b in taint)
        if root == input_root:
            reasons.insert(0, "aligned with the model input")
        consumers: dict[tuple[str, int], PathDescriptor] = {}
        for p in mem:
            paths, barrier = consumer_paths(g, p)
            if barrier:
                reasons.append(barrier)
            for d in paths:
                consumers.setdefault(d.key, d)
        cons = tuple(sorted(consumers.values(), key=lambda d: (g.position[d.consumer], d.offset)))
        groups.append(MergeGroup(tuple(mem), g.shapes[mem[0]][0], cons,
                                 eligible=not reasons, reason=reasons[0] if reasons else None))
    groups.sort(key=lambda grp: g.position[grp.members[0]])
    return groups


def producer_edges(g: Graph) -> list[ProducerEdge]:
    """Every Conv2d/Linear output edge with its consumers and eligibility."""
    group_of = {m: grp for grp in merge_groups(g) for m in grp.members}
    out = []
    for p in g.linear_nodes():
        paths, _ = consumer_paths(g, p)
        grp = group_of[p]
        out.append(ProducerEdge(p, g.shapes[p][0], paths, g.owned_bn(p), grp.eligible, grp.reason))
    return out


def eligible_producers(g: Graph) -> list[ProducerEdge]:
    return [e for e in producer_edges(g) if e.eligible]
