"""Dataflow IR: nodes, validation, shape inference, evaluation, JSON format.

A :class:`Graph` is treated as a value.  Everything that edits parameters
(attack, recovery) works on ``graph.copy()`` and calls :meth:`Graph.refresh`
to re-validate before handing the result back.

JSON model format::

    {"nodes": [{"id": ..., "kind": ..., <scalar attrs>, <tensors as nested lists>}, ...],
     "edges": [[src, dst, port], ...],
     "meta": {...}}
"""

from __future__ import annotations

import copy
import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

KINDS = ("Input", "Conv2d", "Linear", "BatchNorm", "ReLU", "Add", "Cat",
         "AvgPoolGlobal", "Flatten", "Output")
LINEAR_KINDS = ("Conv2d", "Linear")

ATTRS = {
    "Input": ("shape",),
    "Conv2d": ("groups", "stride", "padding"),
    "BatchNorm": ("eps",),
}
ATTR_DEFAULTS = {"groups": 1, "stride": 1, "padding": 0, "eps": 1e-5}
TENSORS = {
    "Conv2d": ("weight", "bias"),
    "Linear": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta", "running_mean", "running_var"),
}
BN_PARAMS = TENSORS["BatchNorm"]


class GraphError(ValueError):
    """Invalid graph.  ``code`` is one of: duplicate_id, unknown_kind,
    missing_param, dangling_edge, bad_port, arity, io, cycle, shape_conflict."""

    def __init__(self, code: str, message: str, node: str | None = None):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.node = node


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    @property
    def groups(self) -> int:
        return int(self.attrs.get("groups", 1))


def _arity_ok(kind: str, n: int) -> bool:
    if kind == "Input":
        return n == 0
    if kind == "Add":
        return n == 2
    if kind == "Cat":
        return n >= 2
    return n == 1


class Graph:
    def __init__(self, nodes, meta=None):
        self.nodes: dict[str, Node] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise GraphError("duplicate_id", f"node id {node.id!r} used twice", node.id)
            self.nodes[node.id] = node
        self.meta = dict(meta or {})
        self.refresh()

    # -- structure -------------------------------------------------------
    def refresh(self) -> "Graph":
        """Re-validate the graph and recompute order, consumers and shapes."""
        inputs = [n.id for n in self.nodes.values() if n.kind == "Input"]
        outputs = [n.id for n in self.nodes.values() if n.kind == "Output"]
        for node in self.nodes.values():
            if node.kind not in KINDS:
                raise GraphError("unknown_kind", f"unknown node kind {node.kind!r}", node.id)
            if not _arity_ok(node.kind, len(node.inputs)):
                raise GraphError("arity", f"{node.kind} {node.id!r} has {len(node.inputs)} inputs",
                                 node.id)
            for src in node.inputs:
                if src not in self.nodes:
                    raise GraphError("dangling_edge", f"edge {src!r} -> {node.id!r} has no source",
                                     node.id)
            for name in TENSORS.get(node.kind, ()):
                if name not in node.tensors:
                    raise GraphError("missing_param", f"{node.id!r} lacks tensor {name!r}", node.id)
        if len(inputs) != 1 or len(outputs) != 1:
            raise GraphError("io", f"need exactly one Input and one Output, got "
                                   f"{len(inputs)} and {len(outputs)}")
        self.input_id, self.output_id = inputs[0], outputs[0]
        self.consumers = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for port, src in enumerate(node.inputs):
                self.consumers[src].append((node.id, port))
        self.order = _topo(self)
        self.position = {nid: i for i, nid in enumerate(self.order)}
        self.shapes = {}
        for nid in self.order:
            self.shapes[nid] = _infer_shape(self, self.nodes[nid])
        return self

    def copy(self) -> "Graph":
        return copy.deepcopy(self)

    @property
    def edges(self) -> list[tuple[str, str, int]]:
        return [(src, n.id, port) for n in self.nodes.values() for port, src in enumerate(n.inputs)]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.shapes[self.input_id]

    def __getitem__(self, nid: str) -> Node:
        return self.nodes[nid]

    def linear_nodes(self) -> list[str]:
        return [nid for nid in self.order if self.nodes[nid].is_linear]

    def owned_bn(self, nid: str) -> str | None:
        """BatchNorm that is the sole consumer of producer ``nid``, if any."""
        cons = self.consumers[nid]
        if len(cons) == 1 and self.nodes[cons[0][0]].kind == "BatchNorm":
            return cons[0][0]
        return None

    def param_count(self) -> int:
        return sum(int(t.size) for n in self.nodes.values() for t in n.tensors.values())

    def widths(self) -> dict[str, int]:
        """Output channel count of every Conv2d/Linear node."""
        return {nid: self.shapes[nid][0] for nid in self.linear_nodes()}


def _topo(g: Graph) -> list[str]:
    """Kahn's algorithm; among ready nodes the smallest id goes first."""
    indeg = {nid: len(n.inputs) for nid, n in g.nodes.items()}
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for dst, _ in g.consumers[nid]:
            indeg[dst] -= 1
            if indeg[dst] == 0:
                heapq.heappush(ready, dst)
    if len(order) != len(g.nodes):
        stuck = sorted(nid for nid, d in indeg.items() if d > 0)
        raise GraphError("cycle", f"graph has a cycle through {stuck}", stuck[0])
    return order


def topo_order(g: Graph) -> list[str]:
    return list(g.order)


def _infer_shape(g: Graph, node: Node) -> tuple[int, ...]:
    ins = [g.shapes[src] for src in node.inputs]
    kind = node.kind

    def conflict(msg):
        return GraphError("shape_conflict", f"{node.id!r}: {msg}", node.id)

    if kind == "Input":
        shape = tuple(int(s) for s in node.attrs.get("shape", ()))
        if not shape or len(shape) not in (1, 3) or min(shape) < 1:
            raise conflict(f"bad input shape {shape}")
        return shape
    if kind == "Output":
        return ins[0]
    if kind == "Conv2d":
        w, b = node.tensors["weight"], node.tensors["bias"]
        if len(ins[0]) != 3:
            raise conflict(f"Conv2d needs (C, H, W) input, got {ins[0]}")
        if w.ndim != 4:
            raise conflict(f"Conv2d weight must be 4-D, got {w.shape}")
        groups = node.groups
        c_in = ins[0][0]
        if groups < 1 or c_in % groups or w.shape[0] % groups or w.shape[1] * groups != c_in:
            raise conflict(f"weight {w.shape} with groups={groups} does not accept {c_in} channels")
        if b.shape != (w.shape[0],):
            raise conflict(f"bias {b.shape} does not match {w.shape[0]} output channels")
        try:
            h, wd = T.conv_output_hw(ins[0][1], ins[0][2], w.shape[2], w.shape[3],
                                     int(node.attrs.get("stride", 1)),
                                     int(node.attrs.get("padding", 0)))
        except T.ShapeError as exc:
            raise conflict(str(exc)) from None
        return (w.shape[0], h, wd)
    if kind == "Linear":
        w, b = node.tensors["weight"], node.tensors["bias"]
        if len(ins[0]) != 1:
            raise conflict(f"Linear needs a vector input, got {ins[0]}")
        if w.ndim != 2 or w.shape[1] != ins[0][0]:
            raise conflict(f"weight {w.shape} does not accept input of length {ins[0][0]}")
        if b.shape != (w.shape[0],):
            raise conflict(f"bias {b.shape} does not match {w.shape[0]} outputs")
        return (w.shape[0],)
    if kind == "BatchNorm":
        c = ins[0][0]
        for name in BN_PARAMS:
            if node.tensors[name].shape != (c,):
                raise conflict(f"{name} has shape {node.tensors[name].shape}, expected ({c},)")
        if np.any(node.tensors["running_var"] < 0):
            raise conflict("negative running_var")
        return ins[0]
    if kind == "ReLU":
        return ins[0]
    if kind == "Add":
        if ins[0] != ins[1]:
            raise conflict(f"Add operands differ: {ins[0]} vs {ins[1]}")
        return ins[0]
    if kind == "Cat":
        tails = {s[1:] for s in ins}
        if len(tails) != 1:
            raise conflict(f"Cat operands disagree on spatial dims: {sorted(tails)}")
        return (sum(s[0] for s in ins),) + ins[0][1:]
    if kind == "AvgPoolGlobal":
        if len(ins[0]) != 3:
            raise conflict(f"AvgPoolGlobal needs (C, H, W), got {ins[0]}")
        return (ins[0][0],)
    if kind == "Flatten":
        return (int(np.prod(ins[0])),)
    raise conflict(f"unhandled kind {kind}")


# -- evaluation --------------------------------------------------------------

def _eval_node(node: Node, args):
    kind = node.kind
    if kind == "Conv2d":
        return T.conv2d_forward(args[0], node.tensors["weight"], node.tensors["bias"],
                                groups=node.groups, stride=int(node.attrs.get("stride", 1)),
                                padding=int(node.attrs.get("padding", 0)))
    if kind == "Linear":
        return T.linear_forward(args[0], node.tensors["weight"], node.tensors["bias"])
    if kind == "BatchNorm":
        t = node.tensors
        return T.batchnorm_forward(args[0], t["gamma"], t["beta"], t["running_mean"],
                                   t["running_var"], eps=float(node.attrs.get("eps", 1e-5)))
    if kind == "ReLU":
        return T.relu(args[0])
    if kind == "Add":
        return T.add(args[0], args[1])
    if kind == "Cat":
        return T.cat_channels(args)
    if kind == "AvgPoolGlobal":
        return T.avgpool_global(args[0])
    if kind == "Flatten":
        return T.flatten(args[0])
    if kind == "Output":
        return args[0]
    raise GraphError("unknown_kind", f"cannot evaluate {kind}", node.id)


def forward_trace(g: Graph, x, keep=None) -> dict[str, np.ndarray]:
    """Evaluate ``g`` on ``x`` and return node outputs (all, or those in ``keep``)."""
    x = T.as_tensor(x)
    if x.shape != g.input_shape:
        raise T.ShapeError(f"input shape {x.shape} != graph input {g.input_shape}", dim="input")
    values = {}
    remaining = {nid: len(g.consumers[nid]) for nid in g.order}
    out = {}
    for nid in g.order:
        node = g.nodes[nid]
        if node.kind == "Input":
            val = x
        else:
            val = _eval_node(node, [values[src] for src in node.inputs])
            for src in node.inputs:
                remaining[src] -= 1
                if remaining[src] == 0 and (keep is None or src not in keep) and src in values:
                    del values[src]
        values[nid] = val
        if keep is None or nid in keep:
            out[nid] = val
    return out


def forward(g: Graph, x) -> np.ndarray:
    return forward_trace(g, x, keep={g.output_id})[g.output_id]


def max_output_delta(g1: Graph, g2: Graph, probes) -> float:
    """Largest absolute output difference between two graphs over ``probes``."""
    worst = 0.0
    for x in probes:
        a, b = forward(g1, x), forward(g2, x)
        if a.shape != b.shape:
            return float("inf")
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


# -- construction and JSON -------------------------------------------------

def build_graph(spec: dict) -> Graph:
    """Build and validate a graph from the JSON-model dictionary."""
    nodes = []
    seen = set()
    for raw in spec.get("nodes", []):
        nid, kind = str(raw["id"]), raw.get("kind")
        if nid in seen:
            raise GraphError("duplicate_id", f"node id {nid!r} used twice", nid)
        seen.add(nid)
        if kind not in KINDS:
            raise GraphError("unknown_kind", f"unknown node kind {kind!r}", nid)
        attrs = {}
        for name in ATTRS.get(kind, ()):
            if name in raw:
                attrs[name] = list(raw[name]) if name == "shape" else raw[name]
            elif name in ATTR_DEFAULTS:
                attrs[name] = ATTR_DEFAULTS[name]
        tensors = {}
        for name in TENSORS.get(kind, ()):
            if name not in raw:
                raise GraphError("missing_param", f"{nid!r} lacks tensor {name!r}", nid)
            arr = np.array(raw[name], dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise GraphError("missing_param", f"{nid!r}.{name} has non-finite values", nid)
            tensors[name] = arr
        nodes.append(Node(nid, kind, [], attrs, tensors))
    by_id = {n.id: n for n in nodes}
    ports: dict[str, dict[int, str]] = {n.id: {} for n in nodes}
    for src, dst, port in spec.get("edges", []):
        src, dst, port = str(src), str(dst), int(port)
        if src not in by_id or dst not in by_id:
            raise GraphError("dangling_edge", f"edge {src!r} -> {dst!r} references a missing node",
                             dst if dst in by_id else src)
        if port in ports[dst]:
            raise GraphError("bad_port", f"{dst!r} port {port} connected twice", dst)
        ports[dst][port] = src
    for n in nodes:
        p = ports[n.id]
        if sorted(p) != list(range(len(p))):
            raise GraphError("bad_port", f"{n.id!r} ports {sorted(p)} are not contiguous", n.id)
        n.inputs = [p[i] for i in range(len(p))]
    return Graph(nodes, spec.get("meta"))


def to_spec(g: Graph) -> dict:
    """Inverse of :func:`build_graph`; node order is the graph's storage order."""
    nodes = []
    for node in g.nodes.values():
        entry = {"id": node.id, "kind": node.kind}
        for name in ATTRS.get(node.kind, ()):
            if name in node.attrs:
                entry[name] = node.attrs[name]
        for name in TENSORS.get(node.kind, ()):
            entry[name] = node.tensors[name].tolist()
        nodes.append(entry)
    return {"nodes": nodes, "edges": [list(e) for e in g.edges], "meta": dict(g.meta)}


def dumps(g: Graph) -> str:
    return json.dumps(to_spec(g), allow_nan=False)


def loads(text: str) -> Graph:
    return build_graph(json.loads(text))


def save(g: Graph, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(g))


def load(path) -> Graph:
    with open(path) as fh:
        return loads(fh.read())
