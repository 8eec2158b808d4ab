"""Built-in desk-scale models.

Each motif reproduces one structural pattern of a larger network: plain
chains (``mlp``), fan-out (``fanout``), residual adds (``residual``), branch
concatenation (``inception_mini``), chained concatenation (``dense_mini``) and
a mix of add, cat and fan-out (``mixed``).  Parameters come from the seeded
stream, so ``build(name, seed)`` is reproducible everywhere.
"""

from __future__ import annotations

import numpy as np

from .graph import Graph, Node
from .rng import Rng

IMAGE = (3, 6, 6)


class _Builder:
    def __init__(self, rng: Rng):
        self.rng = rng
        self.nodes: list[Node] = []

    def add(self, nid, kind, inputs=(), **attrs):
        self.nodes.append(Node(nid, kind, list(inputs), attrs, {}))
        return nid

    def conv(self, nid, src, c_in, c_out, k, stride=1, padding=0):
        fan_in = c_in * k * k
        r = self.rng.spawn(nid)
        node = Node(nid, "Conv2d", [src], {"groups": 1, "stride": stride, "padding": padding}, {
            "weight": r.normal((c_out, c_in, k, k), std=1.0 / np.sqrt(fan_in)),
            "bias": r.normal(c_out, std=0.1)})
        self.nodes.append(node)
        return nid

    def linear(self, nid, src, n_in, n_out):
        r = self.rng.spawn(nid)
        self.nodes.append(Node(nid, "Linear", [src], {}, {
            "weight": r.normal((n_out, n_in), std=1.0 / np.sqrt(n_in)),
            "bias": r.normal(n_out, std=0.1)}))
        return nid

    def bn(self, nid, src, c):
        r = self.rng.spawn(nid)
        self.nodes.append(Node(nid, "BatchNorm", [src], {"eps": 1e-5}, {
            "gamma": r.uniform(0.5, 1.5, c), "beta": r.normal(c, std=0.1),
            "running_mean": r.normal(c, std=0.1), "running_var": r.uniform(0.5, 1.5, c)}))
        return nid

    def relu(self, nid, src):
        return self.add(nid, "ReLU", [src])

    def graph(self, name, seed) -> Graph:
        return Graph(self.nodes, {"motif": name, "seed": seed})


def mlp(b: _Builder):
    b.add("in", "Input", shape=[10])
    b.relu("relu1", b.linear("fc1", "in", 10, 16))
    b.relu("relu2", b.linear("fc2", "relu1", 16, 12))
    b.add("out", "Output", [b.linear("fc3", "relu2", 12, 4)])


def fanout(b: _Builder):
    b.add("in", "Input", shape=list(IMAGE))
    b.relu("relu1", b.bn("bn1", b.conv("conv1", "in", 3, 6, 3, padding=1), 6))
    b.relu("reluA", b.conv("convA", "relu1", 6, 5, 3, padding=1))
    b.relu("reluB", b.conv("convB", "relu1", 6, 4, 1))
    b.add("cat", "Cat", ["reluA", "reluB"])
    b.add("pool", "AvgPoolGlobal", ["cat"])
    b.add("out", "Output", [b.linear("fc", "pool", 9, 3)])


def residual(b: _Builder):
    b.add("in", "Input", shape=list(IMAGE))
    x = b.relu("stem.relu", b.bn("stem.bn", b.conv("stem", "in", 3, 6, 3, padding=1), 6))
    for blk in ("b1", "b2"):
        h = b.relu(f"{blk}.relu1", b.bn(f"{blk}.bn1",
                                       b.conv(f"{blk}.conv1", x, 6, 6, 3, padding=1), 6))
        h = b.bn(f"{blk}.bn2", b.conv(f"{blk}.conv2", h, 6, 6, 3, padding=1), 6)
        x = b.relu(f"{blk}.relu2", b.add(f"{blk}.add", "Add", [h, x]))
    b.add("pool", "AvgPoolGlobal", [x])
    b.add("out", "Output", [b.linear("fc", "pool", 6, 3)])


def inception_mini(b: _Builder):
    b.add("in", "Input", shape=list(IMAGE))
    x = b.relu("stem.relu", b.bn("stem.bn", b.conv("stem", "in", 3, 6, 3, stride=2, padding=1), 6))
    b.relu("br1.relu", b.conv("br1", x, 6, 4, 1))
    b.relu("br2.relu", b.bn("br2.bn", b.conv("br2", x, 6, 5, 3, padding=1), 5))
    b.add("cat", "Cat", ["br1.relu", "br2.relu"])
    b.add("flat", "Flatten", ["cat"])
    b.add("out", "Output", [b.linear("fc", "flat", 9 * 9, 3)])


def dense_mini(b: _Builder):
    b.add("in", "Input", shape=list(IMAGE))
    x0 = b.relu("stem.relu", b.bn("stem.bn", b.conv("stem", "in", 3, 4, 3, padding=1), 4))
    x1 = b.relu("c1.relu", b.conv("c1", x0, 4, 4, 3, padding=1))
    cat1 = b.add("cat1", "Cat", [x0, x1])
    x2 = b.relu("c2.relu", b.conv("c2", cat1, 8, 4, 3, padding=1))
    cat2 = b.add("cat2", "Cat", [cat1, x2])
    t = b.relu("trans.relu", b.conv("trans", cat2, 12, 6, 1))
    b.add("pool", "AvgPoolGlobal", [t])
    b.add("out", "Output", [b.linear("fc", "pool", 6, 3)])


def mixed(b: _Builder):
    b.add("in", "Input", shape=list(IMAGE))
    s = b.relu("stem.relu", b.bn("stem.bn", b.conv("stem", "in", 3, 6, 3, stride=2, padding=1), 6))
    a = b.bn("a.bn", b.conv("a", s, 6, 6, 3, padding=1), 6)
    r = b.relu("add.relu", b.add("add", "Add", [a, s]))
    bb = b.relu("b.relu", b.conv("b", s, 6, 4, 1))
    b.add("cat", "Cat", [r, bb])
    b.add("flat", "Flatten", ["cat"])
    b.add("out", "Output", [b.linear("fc", "flat", 10 * 9, 3)])


MOTIFS = {
    "mlp": (mlp, ["fc2", "fc1"]),
    "fanout": (fanout, ["convA", "conv1", "convB"]),
    "residual": (residual, ["b1.conv1", "b2.conv1", "b1.conv2", "stem"]),
    "inception_mini": (inception_mini, ["br2", "stem", "br1"]),
    "dense_mini": (dense_mini, ["c2", "c1", "trans", "stem"]),
    "mixed": (mixed, ["a", "stem", "b"]),
}
NAMES = tuple(MOTIFS)


def build(name: str, seed: int = 0) -> Graph:
    if name not in MOTIFS:
        raise KeyError(f"unknown motif {name!r}; choose from {', '.join(NAMES)}")
    b = _Builder(Rng(seed).spawn(f"motif:{name}"))
    MOTIFS[name][0](b)
    return b.graph(name, seed)


def watermark_targets(name: str) -> list[str]:
    """Layers that can carry a watermark; the first is the default."""
    return list(MOTIFS[name][1])


def default_target(name: str) -> str:
    return MOTIFS[name][1][0]
