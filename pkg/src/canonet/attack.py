"""Function-preserving structural obfuscation of a graph.

Three injection primitives widen a producer edge without changing the network
function:

* ``zero``: ``d`` channels with zero incoming weights and bias.
* ``clique``: ``d >= 2`` identical channels whose consumer columns are
  ``W @ mu_j`` with ``sum_j mu_j = 0``, so their contributions cancel.
* ``split``: one channel replaced by ``k = d + 1`` copies whose consumer
  columns carry ``1/k`` of the original column each.

Everything is done per merge group so that Add operands keep one layout.  After
each injection the new channels are interleaved among the old ones; optional
camouflage then permutes and positively rescales the channels.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import surgery
from .graph import Graph, GraphError, max_output_delta
from .probes import ProbeConfig, make_probes
from .rng import Rng
from .structure import merge_groups
from .transform import ChannelTransform

PRIMITIVES = ("zero", "clique", "split")
VARIANTS = PRIMITIVES + ("mix_opseq", "mix_opseq_per_merge_group")
CAMOUFLAGE = ("none", "perm", "scale", "perm_and_scale")
MIX_VARIANTS = ("mix_opseq", "mix_opseq_per_merge_group")
DRIFT_SEED = 0x5EED0D21F7


class AttackError(RuntimeError):
    def __init__(self, message: str, edge: str | None = None):
        super().__init__(message if edge is None else f"{edge}: {message}")
        self.edge = edge


@dataclass
class AttackConfig:
    ratio: float = 0.2
    variant: str = "zero"
    opseq_len: int = 3
    split_p: float = 1.0
    camouflage: str = "none"
    scale_range: tuple[float, float] = (0.6, 1.4)
    seed: int = 0
    interior_placement: bool = True

    def __post_init__(self):
        lo, hi = self.scale_range
        self.scale_range = (float(lo), float(hi))
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.opseq_len < 1:
            raise ValueError("opseq_len must be positive")
        if not 0.0 <= self.split_p <= 1.0:
            raise ValueError(f"split_p must lie in [0, 1], got {self.split_p}")
        if self.camouflage not in CAMOUFLAGE:
            raise ValueError(f"unknown camouflage {self.camouflage!r}")
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad scale range {self.scale_range}")

    @property
    def steps(self) -> int:
        return self.opseq_len if self.variant in MIX_VARIANTS else 1


def injection_count(ratio: float, channels: int) -> int:
    """``ceil(ratio * channels)`` evaluated on the decimal value of ``ratio``,
    so that e.g. 0.2 * 15 gives 3 rather than 4."""
    return math.ceil(Fraction(ratio).limit_denominator(10**6) * channels)


@dataclass
class GroupPlan:
    members: tuple[str, ...]
    channels: int
    steps: list[tuple[str, int]]            # (primitive, d) per step
    trajectory: list[int]                   # width before step 0, after each step
    promoted: list[int] = field(default_factory=list)   # steps where clique d=1 became 2


@dataclass
class InjectionPlan:
    groups: list[GroupPlan]
    sequence: list[str] | None              # the global sequence for mix_opseq
    skipped: dict[str, str]                 # ineligible producer -> reason

    def predicted_widths(self, g: Graph) -> dict[str, int]:
        widths = g.widths()
        for gp in self.groups:
            for m in gp.members:
                widths[m] = gp.trajectory[-1]
        return widths


def _sequence(rng: Rng, cfg: AttackConfig) -> list[str]:
    if cfg.variant not in MIX_VARIANTS:
        return [cfg.variant]
    return [PRIMITIVES[i] for i in rng.below(len(PRIMITIVES), cfg.steps)]


def plan_injection(g: Graph, cfg: AttackConfig) -> InjectionPlan:
    """Per merge group: the primitive for each step and the resulting widths."""
    rng = Rng(cfg.seed)
    groups = merge_groups(g)
    skipped = {m: grp.reason for grp in groups if not grp.eligible for m in grp.members}
    eligible = [grp for grp in groups if grp.eligible]
    if not eligible:
        warnings.warn("graph has no eligible producers; the attack is the identity",
                      stacklevel=2)
    seq = _sequence(rng.spawn("opseq"), cfg) if cfg.variant == "mix_opseq" else None
    plans = []
    for grp in eligible:
        if cfg.variant == "mix_opseq_per_merge_group":
            prims = _sequence(rng.spawn(f"opseq:{grp.members[0]}"), cfg)
        else:
            prims = seq or [cfg.variant]
        width = grp.channels
        traj, steps, promoted = [width], [], []
        for t, prim in enumerate(prims):
            d = injection_count(cfg.ratio, width)
            if prim == "clique" and d == 1:
                d = 2
                promoted.append(t)
            steps.append((prim, d))
            width += d
            traj.append(width)
        plans.append(GroupPlan(grp.members, grp.channels, steps, traj, promoted))
    return InjectionPlan(plans, seq, skipped)


# -- primitives --------------------------------------------------------------
# Each primitive edits every member of one merge group and rewrites the group's
# consumers, leaving the graph consistent.  ``paths`` must describe the group
# consumers on the graph as it was before the call.

def _members_and_paths(g: Graph, members) -> tuple[tuple[str, ...], tuple, int]:
    for grp in merge_groups(g):
        if grp.members == tuple(members):
            return grp.members, grp.consumers, grp.channels
    raise AttackError("merge group disappeared", members[0])


def _finish(g: Graph, members, paths, m: ChannelTransform) -> None:
    surgery.rewrite_consumers(g, paths, m)
    try:
        g.refresh()
    except GraphError as exc:
        raise AttackError(f"shape inconsistency after rewrite: {exc}", members[0]) from exc


def inject_zero(g: Graph, members, d: int, rng: Rng | None = None) -> ChannelTransform:
    members, paths, c = _members_and_paths(g, members)
    if d == 0:
        return ChannelTransform.identity(c)
    for p in members:
        w = g.nodes[p].tensors["weight"]
        surgery.append_channels(g, p, np.zeros((d,) + w.shape[1:]), np.zeros(d))
    m = ChannelTransform(c, c + d, tuple((i, i, 1.0) for i in range(c)))
    _finish(g, members, paths, m)
    return m


def clique_mu(rng: Rng, c: int, d: int) -> np.ndarray:
    """``d`` random mixing vectors of length ``c``, centred so they sum to zero."""
    raw = rng.normal((d, c))
    return raw - raw.mean(axis=0, keepdims=True)


def inject_clique(g: Graph, members, d: int, rng: Rng) -> ChannelTransform:
    members, paths, c = _members_and_paths(g, members)
    if d == 0:
        return ChannelTransform.identity(c)
    d = max(d, 2)
    for p in members:
        w = g.nodes[p].tensors["weight"]
        mu_hat, sd_hat = float(w.mean()), float(w.std())
        base = rng.spawn(f"base:{p}").normal(w.shape[1:], mean=mu_hat, std=sd_hat)
        surgery.append_channels(g, p, np.repeat(base[None], d, axis=0), np.zeros(d))
    mu = clique_mu(rng.spawn("mu"), c, d)
    entries = [(i, i, 1.0) for i in range(c)]
    entries += [(i, c + j, float(mu[j, i])) for j in range(d) for i in range(c) if mu[j, i] != 0]
    m = ChannelTransform(c, c + d, tuple(entries))
    _finish(g, members, paths, m)
    return m


def split_baseline(c: int, p: float) -> int:
    return min(c - 1, math.floor(p * (c - 1) + 0.5))


def inject_split(g: Graph, members, d: int, p: float, rng: Rng | None = None) -> ChannelTransform:
    members, paths, c = _members_and_paths(g, members)
    if d == 0:
        return ChannelTransform.identity(c)
    b = split_baseline(c, p)
    k = d + 1
    idx = [i for i in range(c) if i != b] + [b] * k
    for mem in members:
        surgery.select_channels(g, mem, idx)
    entries = [(old, new, 1.0) for new, old in enumerate(idx[:c - 1])]
    entries += [(b, c - 1 + q, 1.0 / k) for q in range(k)]
    m = ChannelTransform(c, c - 1 + k, tuple(entries))
    _finish(g, members, paths, m)
    return m


def permute_group(g: Graph, members, perm) -> ChannelTransform:
    """New channel ``k`` is old channel ``perm[k]``."""
    members, paths, _ = _members_and_paths(g, members)
    for p in members:
        surgery.select_channels(g, p, perm)
    m = ChannelTransform.from_perm_scale(perm)
    _finish(g, members, paths, m)
    return m


def interior_perm(rng: Rng, c: int, fresh: list[int]) -> list[int]:
    """Spread the ``fresh`` channel indices over random positions while the
    remaining channels keep their relative order."""
    fresh_set = set(fresh)
    slots = set(rng.permutation(c)[:len(fresh)])
    fresh_iter = iter(fresh)
    keep_iter = iter(i for i in range(c) if i not in fresh_set)
    return [next(fresh_iter) if k in slots else next(keep_iter) for k in range(c)]


def scale_group(g: Graph, members, lo: float, hi: float, rng: Rng) -> dict:
    """Positive per-channel rescaling that leaves the function unchanged.

    If every member has its own BatchNorm, each member gets independent scales
    and the BatchNorm statistics absorb them exactly.  Otherwise one scale
    vector is shared by the group, BatchNorm members scale gamma and beta, and
    the consumers are compensated with ``M = D^-1`` (valid because every node
    between producer and consumer is positively homogeneous).
    """
    members, paths, c = _members_and_paths(g, members)
    bns = {p: g.owned_bn(p) for p in members}
    anchors = {}
    if all(bns.values()):
        draws = {p: rng.spawn(f"scale:{p}").uniform(lo, hi, c) for p in members}
        for p, s in draws.items():
            bn = g.nodes[bns[p]]
            eps = float(bn.attrs.get("eps", 1e-5))
            new_var = s * s * (bn.tensors["running_var"] + eps) - eps
            if np.any(new_var < 0):
                return {"skipped": f"running_var of {bns[p]} too small to rescale"}
        for p, s in draws.items():
            bn = g.nodes[bns[p]]
            eps = float(bn.attrs.get("eps", 1e-5))
            surgery.scale_rows(g, p, s)
            bn.tensors["running_mean"] = bn.tensors["running_mean"] * s
            bn.tensors["running_var"] = s * s * (bn.tensors["running_var"] + eps) - eps
            anchors[p] = s.tolist()
        g.refresh()
        return {"mode": "batchnorm", "scales": anchors}
    s = rng.spawn("scale:shared").uniform(lo, hi, c)
    for p in members:
        if bns[p]:
            t = g.nodes[bns[p]].tensors
            t["gamma"] = t["gamma"] * s
            t["beta"] = t["beta"] * s
        else:
            surgery.scale_rows(g, p, s)
    _finish(g, members, paths, ChannelTransform.from_perm_scale(list(range(c)), s))
    return {"mode": "consumer", "scales": {p: s.tolist() for p in members}}


def apply_camouflage(g: Graph, members, cfg: AttackConfig, rng: Rng) -> dict:
    out = {}
    if cfg.camouflage in ("perm", "perm_and_scale"):
        c = g.shapes[members[0]][0]
        perm = rng.spawn("perm").permutation(c)
        permute_group(g, members, perm)
        out["perm"] = perm
    if cfg.camouflage in ("scale", "perm_and_scale"):
        out["scale"] = scale_group(g, members, *cfg.scale_range, rng.spawn("scale"))
    return out


# -- driver --------------------------------------------------------------

@dataclass
class AttackReport:
    config: dict
    plan: list[dict]
    sequence: list[str] | None
    skipped: dict[str, str]
    widths_before: dict[str, int]
    widths_after: dict[str, int]
    camouflage: dict[str, dict]
    drift: float
    timings_ns: dict[str, int]

    def to_json(self, timings: bool = True) -> dict:
        out = asdict(self)
        if not timings:
            out.pop("timings_ns")
        return out


def attack(g: Graph, cfg: AttackConfig, probes=None) -> tuple[Graph, AttackReport]:
    """Run the planned injections group by group in topological order.

    ``probes`` (default: 16 fixed uniform probes) are used to report drift.
    """
    t0 = time.perf_counter_ns()
    plan = plan_injection(g, cfg)
    t1 = time.perf_counter_ns()
    rng = Rng(cfg.seed)
    out = g.copy()
    camo = {}
    plan_json = []
    for gp in plan.groups:
        grng = rng.spawn(f"group:{gp.members[0]}")
        for t, (prim, d) in enumerate(gp.steps):
            srng = grng.spawn(f"step:{t}")
            before = out.shapes[gp.members[0]][0]
            if prim == "zero":
                inject_zero(out, gp.members, d)
                fresh = list(range(before, before + d))
            elif prim == "clique":
                inject_clique(out, gp.members, d, srng)
                fresh = list(range(before, before + d))
            else:
                inject_split(out, gp.members, d, cfg.split_p, srng)
                fresh = list(range(before - 1, before + d)) if d else []
            if cfg.interior_placement and fresh:
                c = out.shapes[gp.members[0]][0]
                permute_group(out, gp.members, interior_perm(srng.spawn("place"), c, fresh))
            width = out.shapes[gp.members[0]][0]
            if width != gp.trajectory[t + 1]:
                raise AttackError(f"width {width} after step {t}, plan says "
                                  f"{gp.trajectory[t + 1]}", gp.members[0])
        if cfg.camouflage != "none":
            camo[gp.members[0]] = apply_camouflage(out, gp.members, cfg, grng.spawn("camouflage"))
        plan_json.append({"members": list(gp.members), "steps": [list(s) for s in gp.steps],
                          "trajectory": gp.trajectory, "promoted_cliques": gp.promoted})
    t2 = time.perf_counter_ns()
    predicted = plan.predicted_widths(g)
    for nid, w in out.widths().items():
        if w != predicted[nid]:
            raise AttackError(f"width {w} differs from planned {predicted[nid]}", nid)
    if probes is None:
        probes = make_probes(ProbeConfig(T=16, seed=DRIFT_SEED), g.input_shape)
    drift = max_output_delta(g, out, probes)
    t3 = time.perf_counter_ns()
    report = AttackReport(
        config=asdict(cfg), plan=plan_json, sequence=plan.sequence, skipped=plan.skipped,
        widths_before=g.widths(), widths_after=out.widths(), camouflage=camo, drift=drift,
        timings_ns={"plan": t1 - t0, "inject": t2 - t1, "drift": t3 - t2})
    out.meta = dict(g.meta, attacked=True)
    return out, report

