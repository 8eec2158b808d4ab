"""Probe-driven recovery of a compact channel layout.

Outline, per eligible merge group (topological order of the first member):

1. One probe pass records, for every member, the activation at its capture
   site (after an owned BatchNorm, else the producer output) and summarises
   channel ``i`` on probe ``t`` as ``u[i, t] = mean(relu(y_i))``.
2. Channels are bucketed by the hash of their activity bits ``u > 0``
   (concatenated over members), then split by exact bit equality.
3. Inside a bucket, pairs are proportional when their summaries are (median
   ratio test) or when their BN-folded incoming rows are.  A pair counts only
   if it holds in every member with the same ratio.  Connected components are
   the redundancy clusters; the lowest index represents the cluster.
4. A cluster is dropped when its merged consumer column ``sum_j a_j W[:, j]``
   is negligible for every consumer, merged when the member contributions are
   positive multiples of one column, and otherwise left alone as ambiguous.
5. The kept layout defines ``M_e`` (``y_attacked = M_e @ y_compact``); the
   producers are compacted and every consumer is rewritten ``W <- W @ M_e``.

Compacting a later group can unblock an earlier one (its consumer rows lose
injected channels), so the loop over groups repeats until nothing changes.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels, surgery
from .graph import Graph, GraphError, forward_trace, max_output_delta
from .probes import DEFAULT_PROBE_SEED, ProbeConfig, make_probes
from .rng import fnv1a64
from .structure import MergeGroup, merge_groups
from .transform import ChannelTransform

SANITY_PROBE_SEED = DEFAULT_PROBE_SEED ^ 0x5A417
__all__ = ["ProbeConfig", "make_probes", "RecoveryConfig", "ProbeRecord", "capture",
           "bucket_by_signature", "refine_proportional", "decide_drop_or_merge",
           "synthesize_transform", "recover", "RecoveryError", "SanityCheckError"]


class RecoveryError(RuntimeError):
    pass


class SanityCheckError(RecoveryError):
    """The recovered graph does not reproduce the input graph.

    ``original`` is the untouched input graph; ``recovered`` is the failed
    result (``None`` when it was not even shape-consistent).
    """

    def __init__(self, message, original, recovered=None, delta=float("inf"), report=None):
        super().__init__(message)
        self.original = original
        self.recovered = recovered
        self.delta = delta
        self.report = report


@dataclass
class RecoveryConfig:
    eps: float = 1e-6
    tau: float = 1e-3
    t_min: int = 3
    gamma_drop: float = 1e-6
    gamma_keep: float = 1e-3
    weight_tol: float = 1e-6
    active_ratio_gate: tuple[float, float] | None = None
    sanity_check: bool = True
    sanity_tol: float = 1e-7
    sanity_probes: int = 16
    max_sync_passes: int = 8
    selection: str = "graph"
    fault_skip_consumer: str | None = None

    def __post_init__(self):
        if not (self.eps > 0 and self.tau > 0 and self.t_min >= 1):
            raise ValueError("need eps > 0, tau > 0 and t_min >= 1")
        if not 0 <= self.gamma_drop <= self.gamma_keep:
            raise ValueError("need 0 <= gamma_drop <= gamma_keep")
        if self.active_ratio_gate is not None:
            lo, hi = self.active_ratio_gate
            if not 0 <= lo <= hi <= 1:
                raise ValueError("active ratio gate must satisfy 0 <= lo <= hi <= 1")
            self.active_ratio_gate = (float(lo), float(hi))
        if self.selection not in ("graph", "naive"):
            raise ValueError("selection is 'graph' or 'naive'")
        if self.max_sync_passes < 1:
            raise ValueError("max_sync_passes must be positive")


# -- probe capture -----------------------------------------------------------

@dataclass
class ProbeRecord:
    """Per-producer summaries ``u`` (channels x probes) and capture sites."""
    u: dict[str, np.ndarray]
    site: dict[str, str]

    def bits(self, edge: str) -> np.ndarray:
        return self.u[edge] > 0


def capture_site(g: Graph, producer: str) -> str:
    return g.owned_bn(producer) or producer


def capture(g: Graph, probes, edges, timings: dict | None = None) -> ProbeRecord:
    sites = {e: capture_site(g, e) for e in edges}
    keep = set(sites.values())
    t0 = time.perf_counter_ns()
    traces = [forward_trace(g, x, keep=keep) for x in probes]
    t1 = time.perf_counter_ns()
    u = {}
    for e, site in sites.items():
        cols = []
        for tr in traces:
            y = np.maximum(tr[site], 0.0)
            cols.append(y.reshape(y.shape[0], -1).mean(axis=1))
        u[e] = np.ascontiguousarray(np.stack(cols, axis=1))
    if timings is not None:
        timings["probe"] = timings.get("probe", 0) + t1 - t0
        timings["summarize"] = timings.get("summarize", 0) + time.perf_counter_ns() - t1
    return ProbeRecord(u, {e: ("post_bn" if s != e else "producer_output")
                           for e, s in sites.items()})


# -- clustering --------------------------------------------------------------

def signature(bits_row, hash_fn=fnv1a64) -> int:
    """Hash of the bit row packed 8 per byte, probe ``t`` at bit ``t % 8``."""
    packed = np.packbits(np.asarray(bits_row, dtype=bool), bitorder="little")
    return hash_fn(packed.tobytes())


def bucket_by_signature(bits, channels=None, hash_fn=fnv1a64) -> list[list[int]]:
    """Group channel indices with identical bit rows.

    Channels are first grouped by hash, then each hash bucket is split by exact
    row equality, so a hash collision never merges different rows.
    """
    bits = np.asarray(bits, dtype=bool)
    channels = range(bits.shape[0]) if channels is None else channels
    by_hash: dict[int, list[int]] = {}
    for i in channels:
        by_hash.setdefault(signature(bits[i], hash_fn), []).append(i)
    buckets = []
    for members in by_hash.values():
        while members:
            head = members[0]
            same = [j for j in members if np.array_equal(bits[j], bits[head])]
            buckets.append(same)
            members = [j for j in members if j not in same]
    buckets.sort(key=lambda b: b[0])
    return buckets


@dataclass
class RedundancyCluster:
    edge: str
    members: list[int]
    rep: int
    alpha: dict[int, float]
    zero: bool = False
    decision: str | None = None
    rel_norm: float | None = None
    note: str | None = None


def _weight_pairs(rows: np.ndarray, idx, tol: float) -> dict[tuple[int, int], float]:
    """Pairs whose rows satisfy ``row_j = a * row_i`` with ``a > 0``."""
    out = {}
    norms = np.linalg.norm(rows[idx], axis=1)
    for a, i in enumerate(idx):
        if norms[a] == 0:
            continue
        ri = rows[i]
        for b in range(a + 1, len(idx)):
            j = idx[b]
            rj = rows[j]
            alpha = float(rj @ ri) / float(ri @ ri)
            if alpha > 0 and np.linalg.norm(rj - alpha * ri) <= tol * max(norms[b], 1e-300):
                out[(i, j)] = alpha
    return out


def _activation_pairs(u: np.ndarray, idx, cfg: RecoveryConfig) -> dict[tuple[int, int], float]:
    sub = np.ascontiguousarray(u[idx])
    ii, jj, aa = kernels.proportional_pairs(sub, cfg.eps, cfg.tau, cfg.t_min)
    return {(idx[i], idx[j]): float(a) for i, j, a in zip(ii, jj, aa)}


def _components(nodes, pairs: dict[tuple[int, int], float]):
    adj: dict[int, list[tuple[int, float]]] = {n: [] for n in nodes}
    for (i, j), a in pairs.items():
        adj[i].append((j, a))
        adj[j].append((i, 1.0 / a))
    seen = set()
    for start in sorted(nodes):
        if start in seen or not adj[start]:
            continue
        alpha = {start: 1.0}
        queue = deque([start])
        seen.add(start)
        while queue:
            n = queue.popleft()
            for m, a in sorted(adj[n]):
                if m not in alpha:
                    alpha[m] = alpha[n] * a
                    seen.add(m)
                    queue.append(m)
        yield sorted(alpha), alpha


def refine_proportional(u_members, bucket, cfg: RecoveryConfig, rows_members=None,
                        edge: str = "", log: list | None = None) -> list[RedundancyCluster]:
    """Clusters of mutually proportional channels inside one bucket.

    ``u_members`` holds one summary matrix per group member (a bare matrix is
    one member); ``rows_members`` optionally holds the matching BN-folded
    weight rows, which add exact weight-level proportionality.  A pair is kept
    only if every member accepts it with ratios agreeing within ``tau``.
    """
    if isinstance(u_members, np.ndarray):
        u_members = [u_members]
        rows_members = None if rows_members is None else [rows_members]
    bucket = sorted(bucket)
    zero = all(not np.any(u[bucket] > 0) for u in u_members)
    if len(bucket) < 2:
        return []
    per_member = []
    for k, u in enumerate(u_members):
        pairs = {} if zero else _activation_pairs(u, bucket, cfg)
        if rows_members is not None:
            pairs.update(_weight_pairs(rows_members[k], bucket, cfg.weight_tol))
        per_member.append(pairs)
    accepted = {}
    for pair, a in per_member[0].items():
        others = [pm.get(pair) for pm in per_member[1:]]
        if all(o is not None and abs(o - a) <= cfg.tau * max(abs(a), abs(o)) for o in others):
            accepted[pair] = a
        elif log is not None:
            log.append({"edge": edge, "pair": list(pair), "event": "rejected by group intersection"})
    clusters = []
    for members, alpha in _components(bucket, accepted):
        clusters.append(RedundancyCluster(edge, members, members[0],
                                          {m: alpha[m] for m in members}, zero=zero))
    return clusters


def _gate(u_members, cfg: RecoveryConfig, channels) -> list[int]:
    if cfg.active_ratio_gate is None:
        return list(channels)
    lo, hi = cfg.active_ratio_gate
    kept = []
    for i in channels:
        ratios = [float(np.mean(u[i] > 0)) for u in u_members]
        if all(r == 0 for r in ratios) or all(lo <= r <= hi for r in ratios):
            kept.append(i)
    return kept


# -- decisions -------------------------------------------------------------

@dataclass
class ConsumerView:
    """Columns of one consumer slice, one block per producer channel."""
    consumer: str
    columns: np.ndarray          # (channels, rows, per-channel column length)
    frob: float                  # Frobenius norm of the full consumer weight
    self_member: bool = False    # consumer is itself a member of the group


def consumer_views(g: Graph, grp: MergeGroup) -> list[ConsumerView]:
    views = []
    for d in grp.consumers:
        w = g.nodes[d.consumer].tensors["weight"]
        seg = w[:, d.offset:d.offset + d.width]
        seg = seg.reshape((w.shape[0], d.channels, d.hw) + w.shape[2:])
        cols = np.moveaxis(seg, 1, 0).reshape(d.channels, w.shape[0], -1)
        views.append(ConsumerView(d.consumer, cols, float(np.linalg.norm(w)),
                                  d.consumer in grp.members))
    return views


def decide_drop_or_merge(views, cluster: RedundancyCluster, cfg: RecoveryConfig,
                         row_mask=None, folded_zero: bool = False) -> RedundancyCluster:
    """Set ``cluster.decision`` to ``drop``, ``merge`` or ``ambiguous``.

    ``row_mask`` restricts the output rows of consumers that belong to the
    group itself to those that survive compaction.
    """
    if not views:
        cluster.decision, cluster.rel_norm = "ambiguous", None
        cluster.note = "no downstream consumers"
        return cluster
    denom = max(v.frob for v in views)
    merged_norm = 0.0
    parallel = True
    for v in views:
        cols = v.columns
        if v.self_member and row_mask is not None:
            cols = cols[:, row_mask]
        contrib = np.stack([cluster.alpha[j] * cols[j].reshape(-1) for j in cluster.members])
        merged = contrib.sum(axis=0)
        mn = float(np.linalg.norm(merged))
        merged_norm = max(merged_norm, mn)
        if mn > 0:
            unit = merged / mn
            along = contrib @ unit
            resid = np.linalg.norm(contrib - along[:, None] * unit[None, :], axis=1)
            norms = np.linalg.norm(contrib, axis=1)
            if np.any(resid > cfg.weight_tol * np.maximum(norms, 1e-300)) or np.any(along < 0):
                parallel = False
        if cfg.selection == "naive":
            break
    rel = merged_norm / denom if denom > 0 else 0.0
    cluster.rel_norm = rel
    if cluster.zero and len(cluster.members) == 1:
        cluster.decision = "drop" if (folded_zero or rel <= cfg.gamma_drop) else "keep"
        return cluster
    if rel <= cfg.gamma_drop:
        cluster.decision = "drop"
    elif rel < cfg.gamma_keep:
        cluster.decision, cluster.note = "ambiguous", "merged column below keep threshold"
    elif not parallel and cfg.selection == "graph":
        cluster.decision, cluster.note = "ambiguous", "member contributions not parallel"
    else:
        cluster.decision = "merge"
    return cluster


def synthesize_transform(channels: int, clusters) -> tuple[ChannelTransform, list[int]]:
    """``M_e`` and the kept channel list for the given decided clusters."""
    removed, absorbed = set(), {}
    claimed = set()
    for cl in clusters:
        if claimed & set(cl.members):
            raise RecoveryError(f"clusters overlap on {sorted(claimed & set(cl.members))}")
        claimed |= set(cl.members)
        if cl.decision == "drop":
            removed |= set(cl.members)
        elif cl.decision == "merge":
            for j in cl.members:
                if j != cl.rep:
                    removed.add(j)
                    absorbed[j] = (cl.rep, cl.alpha[j])
    kept = [i for i in range(channels) if i not in removed]
    col = {i: k for k, i in enumerate(kept)}
    entries = [(i, col[i], 1.0) for i in kept]
    entries += [(j, col[r], a) for j, (r, a) in absorbed.items()]
    return ChannelTransform(channels, len(kept), tuple(entries)), kept


# -- driver ------------------------------------------------------------------

@dataclass
class GroupOutcome:
    members: tuple[str, ...]
    width_before: int
    width_after: int
    clusters: list[dict]
    transform: dict
    sync_pass: int


@dataclass
class RecoveryReport:
    config: dict
    probe_config: dict
    widths_before: dict[str, int]
    widths_after: dict[str, int] = field(default_factory=dict)
    groups: list[dict] = field(default_factory=list)
    skipped: dict[str, str] = field(default_factory=dict)
    intersection_log: list[dict] = field(default_factory=list)
    sync_passes: int = 0
    sanity_delta: float | None = None
    timings_ns: dict[str, int] = field(default_factory=dict)

    @property
    def ambiguous(self) -> int:
        """Ambiguous clusters in the latest analysis of each group.  Earlier
        sync passes can see clusters that a later compaction resolves."""
        latest = {tuple(grp["members"]): grp for grp in self.groups}
        return sum(1 for grp in latest.values() for cl in grp["clusters"]
                   if cl["decision"] == "ambiguous")

    def to_json(self, timings: bool = True) -> dict:
        out = asdict(self)
        out["ambiguous_clusters"] = self.ambiguous
        if not timings:
            out.pop("timings_ns")
        return out


def _analyse(g: Graph, grp: MergeGroup, record: ProbeRecord, rows: dict, cfg: RecoveryConfig,
             log: list) -> tuple[list[RedundancyCluster], ChannelTransform, list[int]]:
    c = grp.channels
    us = [record.u[m][rows[m]] for m in grp.members]
    folded = [surgery.folded_rows(g, m) for m in grp.members]
    bits = np.concatenate([u > 0 for u in us], axis=1)
    candidates = _gate(us, cfg, range(c))
    clusters = []
    zero_single = []
    for bucket in bucket_by_signature(bits, candidates):
        found = refine_proportional(us, bucket, cfg, folded, edge=grp.members[0], log=log)
        clusters.extend(found)
        if not np.any(bits[bucket[0]]):
            covered = {m for cl in found for m in cl.members}
            zero_single.extend(i for i in bucket if i not in covered)
    for i in zero_single:
        clusters.append(RedundancyCluster(grp.members[0], [i], i, {i: 1.0}, zero=True))
    clusters.sort(key=lambda cl: cl.rep)
    views = consumer_views(g, grp)
    folded_zero = {i: all(not np.any(f[i]) for f in folded) for i in zero_single}
    # Rows of group members that consume the group are filtered to the rows
    # that survive; start by assuming every cluster disappears and refine.
    removed = {m for cl in clusters for m in cl.members}
    for _ in range(len(clusters) + 1):
        mask = np.array([i not in removed for i in range(c)], dtype=bool)
        for cl in clusters:
            decide_drop_or_merge(views, cl, cfg, mask,
                                 folded_zero=folded_zero.get(cl.rep, False))
        now = set()
        for cl in clusters:
            if cl.decision == "drop":
                now |= set(cl.members)
            elif cl.decision == "merge":
                now |= set(cl.members) - {cl.rep}
        if now == removed:
            break
        removed = now
    m_e, kept = synthesize_transform(c, clusters)
    return clusters, m_e, kept


def recover(g_attacked: Graph, rcfg: RecoveryConfig | None = None,
            pcfg: ProbeConfig | None = None) -> tuple[Graph, RecoveryReport]:
    rcfg = rcfg or RecoveryConfig()
    pcfg = pcfg or ProbeConfig()
    timings = {"probe": 0, "summarize": 0, "cluster": 0, "rewrite": 0, "sanity": 0}
    g = g_attacked.copy()
    report = RecoveryReport(asdict(rcfg), asdict(pcfg), g.widths())
    groups = merge_groups(g)
    report.skipped = {m: grp.reason for grp in groups if not grp.eligible for m in grp.members}
    eligible = [grp.members for grp in groups if grp.eligible]
    probes = make_probes(pcfg, g.input_shape)
    record = capture(g, probes, [m for mem in eligible for m in mem], timings)
    rows = {m: np.arange(g.shapes[m][0]) for mem in eligible for m in mem}
    skip = {rcfg.fault_skip_consumer} if rcfg.fault_skip_consumer else set()
    for sync_pass in range(rcfg.max_sync_passes):
        report.sync_passes = sync_pass + 1
        changed = False
        for members in eligible:
            t0 = time.perf_counter_ns()
            grp = next(x for x in merge_groups(g) if x.members == members)
            clusters, m_e, kept = _analyse(g, grp, record, rows, rcfg, report.intersection_log)
            t1 = time.perf_counter_ns()
            timings["cluster"] += t1 - t0
            if clusters and (sync_pass == 0 or not m_e.is_identity()):
                report.groups.append(asdict(GroupOutcome(
                    members, grp.channels, len(kept),
                    [_cluster_json(cl, rows[members[0]]) for cl in clusters],
                    m_e.to_json(), sync_pass)))
            if m_e.is_identity():
                continue
            for m in members:
                surgery.select_channels(g, m, kept)
                rows[m] = rows[m][kept]
            surgery.rewrite_consumers(g, grp.consumers, m_e, skip=skip)
            try:
                g.refresh()
            except GraphError as exc:
                raise SanityCheckError(f"recovered graph is inconsistent at {members[0]}: {exc}",
                                       g_attacked, None, report=report) from exc
            changed = True
            timings["rewrite"] += time.perf_counter_ns() - t1
        if not changed:
            break
    report.widths_after = g.widths()
    t0 = time.perf_counter_ns()
    if rcfg.sanity_check:
        sanity = make_probes(ProbeConfig(T=rcfg.sanity_probes, value_range=pcfg.value_range,
                                         seed=SANITY_PROBE_SEED), g.input_shape)
        report.sanity_delta = max_output_delta(g_attacked, g, sanity)
        timings["sanity"] = time.perf_counter_ns() - t0
        report.timings_ns = timings
        if not report.sanity_delta <= rcfg.sanity_tol:
            raise SanityCheckError(f"recovered output differs by {report.sanity_delta:.3e} "
                                   f"> {rcfg.sanity_tol:.1e}", g_attacked, g,
                                   report.sanity_delta, report)
    report.timings_ns = timings
    g.meta = dict(g_attacked.meta, recovered=True)
    return g, report


def _cluster_json(cl: RedundancyCluster, row_ids) -> dict:
    return {"members": cl.members, "rep": cl.rep,
            "alpha": [cl.alpha[m] for m in cl.members], "zero": cl.zero,
            "decision": cl.decision, "rel_norm": cl.rel_norm, "note": cl.note,
            "probe_rows": [int(row_ids[m]) for m in cl.members]}
