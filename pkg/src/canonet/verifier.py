"""Two-tier ownership verification.

Tier 1 certifies that recovered weights equal the clean reference up to an
output-channel permutation and (optionally) positive per-channel scaling.
Tier 2 is the fallback predicate on watermark similarities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels, surgery
from .graph import Graph
from .structure import merge_groups
from .watermark import Extraction, WatermarkKey, extract_similarity, similarity_of


class VerifyError(ValueError):
    pass


@dataclass
class CertificateConfig:
    perm_tol: float = 1e-3
    eta: float = 1e-12
    allow_scaling: bool = True
    include_bias: bool = False

    def __post_init__(self):
        if not (self.perm_tol > 0 and self.eta > 0):
            raise ValueError("perm_tol and eta must be positive")


@dataclass
class Tier2Config:
    lam: float = 0.9
    delta: float = 0.02

    def __post_init__(self):
        if not (0 < self.lam <= 1 and self.delta >= 0):
            raise ValueError("need 0 < lambda <= 1 and delta >= 0")


@dataclass
class LayerCertificate:
    layer: str
    perm: list[int]              # perm[i] = reference channel matched to recovered channel i
    scales: list[float]          # best scale of each matched pair (1.0 without scaling)
    max_rel_err: float
    match_frac: float
    passed: bool
    reason: str | None = None


def _flat(w, bias=None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    rows = w.reshape(w.shape[0], int(np.prod(w.shape[1:])))
    if bias is not None:
        rows = np.concatenate([rows, np.asarray(bias, dtype=np.float64)[:, None]], axis=1)
    return np.ascontiguousarray(rows)


def _fail(layer, reason) -> LayerCertificate:
    return LayerCertificate(layer, [], [], float("inf"), 0.0, False, reason)


def certify_rows(a: np.ndarray, b: np.ndarray, cfg: CertificateConfig,
                 layer: str = "") -> LayerCertificate:
    """Greedy one-to-one matching of the rows of ``a`` to the rows of ``b``."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise VerifyError(f"empty layer {layer!r}")
    if a.shape[0] != b.shape[0]:
        return _fail(layer, f"{a.shape[0]} channels vs {b.shape[0]} in the reference")
    if a.shape[1] != b.shape[1]:
        return _fail(layer, f"per-channel length {a.shape[1]} vs {b.shape[1]}")
    r = kernels.residual_matrix(a, b, cfg.eta, cfg.allow_scaling)
    rows, cols = kernels.greedy_match(r)
    perm = [0] * a.shape[0]
    scales = [1.0] * a.shape[0]
    nb2 = np.einsum("jk,jk->j", b, b)
    for i, j in zip(rows.tolist(), cols.tolist()):
        perm[i] = j
        if cfg.allow_scaling:
            s = max(0.0, float(a[i] @ b[j]) / (float(nb2[j]) + cfg.eta))
            if np.linalg.norm(a[i] - s * b[j]) < np.linalg.norm(a[i] - b[j]):
                scales[i] = s
    worst = float(r[rows, cols].max())
    frac = len(rows) / a.shape[0]
    ok = frac == 1.0 and worst <= cfg.perm_tol
    return LayerCertificate(layer, perm, scales, worst, frac, ok,
                            None if ok else f"worst matched residual {worst:.3e}")


def certify_layer(w_rec, w_ref, cfg: CertificateConfig | None = None, bias_rec=None,
                  bias_ref=None, layer: str = "") -> LayerCertificate:
    """Tier-1 certificate of one weight tensor against its reference.

    ``R[i, j] = ||w_rec_i - s w_ref_j|| / (||w_ref_j|| + eta)`` with ``s = 1``;
    with scaling allowed, the stabilised best non-negative scale is tried as
    well and the smaller residual kept.  Pairs are taken greedily by smallest
    residual.  Passes iff every channel is matched and the worst matched
    residual is within ``perm_tol``.
    """
    cfg = cfg or CertificateConfig()
    inc = cfg.include_bias and bias_rec is not None and bias_ref is not None
    return certify_rows(_flat(w_rec, bias_rec if inc else None),
                        _flat(w_ref, bias_ref if inc else None), cfg, layer)


# -- model level --------------------------------------------------------------

@dataclass
class Alignment:
    """How recovered channels of a producer map onto clean channels:
    recovered channel ``i`` carries ``scale[i]`` times clean channel ``perm[i]``."""
    perm: list[int]
    scale: list[float]


def _input_alignment(g: Graph, layer: str, align: dict[str, Alignment], groups):
    """Column permutation/scales for ``layer``'s input axis, or ``None`` when some
    upstream group could not be aligned."""
    n = g.shapes[g.nodes[layer].inputs[0]][0]
    dest = np.arange(n)
    scale = np.ones(n)
    for grp in groups:
        for d in grp.consumers:
            if d.consumer != layer:
                continue
            al = align.get(grp.members[0])
            if al is None:
                return None
            if len(al.perm) != d.channels:
                return None
            for i, (j, s) in enumerate(zip(al.perm, al.scale)):
                for k in range(d.hw):
                    dest[d.offset + i * d.hw + k] = d.offset + j * d.hw + k
                    scale[d.offset + i * d.hw + k] = s
    return dest, scale


def aligned_columns(w, dest, scale) -> np.ndarray:
    """Column ``dest[i]`` of the result is column ``i`` of ``w`` times ``scale[i]``."""
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros_like(w)
    shape = (1, -1) + (1,) * (w.ndim - 2)
    out[:, dest] = w * scale.reshape(shape)
    return out


def align_model(g_rec: Graph, g_ref: Graph, cfg: CertificateConfig) -> dict[str, Alignment]:
    """Channel alignment of every eligible merge group of ``g_rec`` onto ``g_ref``.

    Groups are visited in topological order; each is aligned by certifying the
    BN-folded rows of its first member (with its input columns already
    aligned) against the reference.  The folded rows scale exactly like the
    activations the consumers see.
    """
    groups = [grp for grp in merge_groups(g_rec) if grp.eligible]
    align: dict[str, Alignment] = {}
    for grp in groups:
        p = grp.members[0]
        if p not in g_ref.nodes or g_rec.shapes[p][0] != g_ref.shapes[p][0]:
            continue
        cols = _input_alignment(g_rec, p, align, groups)
        if cols is None:
            continue
        rows = surgery.folded_rows(g_rec, p)
        w_shape = g_rec.nodes[p].tensors["weight"].shape
        w_part = rows[:, :-1].reshape(w_shape)
        rec = _flat(aligned_columns(w_part, *cols), rows[:, -1])
        ref = surgery.folded_rows(g_ref, p)
        if rec.shape != ref.shape:
            continue
        cert = certify_rows(rec, ref, CertificateConfig(cfg.perm_tol, cfg.eta, True), p)
        if cert.match_frac == 1.0:
            align[p] = Alignment(cert.perm, cert.scales)
    return align


@dataclass
class CertificateReport:
    layers: list[LayerCertificate]
    passed: bool
    verified: int
    total: int

    def to_json(self) -> dict:
        return asdict(self)


def _aligned_layer(g_rec: Graph, layer: str, align, groups):
    cols = _input_alignment(g_rec, layer, align, groups)
    node = g_rec.nodes[layer]
    if cols is None:
        return None
    return aligned_columns(node.tensors["weight"], *cols)


def certify_model(g_rec: Graph, g_ref: Graph, layers, cfg: CertificateConfig | None = None,
                  align: dict | None = None) -> CertificateReport:
    """Certify each named layer; input columns are first mapped into the
    reference channel order through :func:`align_model`."""
    cfg = cfg or CertificateConfig()
    groups = [grp for grp in merge_groups(g_rec) if grp.eligible]
    align = align_model(g_rec, g_ref, cfg) if align is None else align
    certs = []
    for layer in layers:
        for g, which in ((g_rec, "recovered"), (g_ref, "reference")):
            if layer not in g.nodes or not g.nodes[layer].is_linear:
                raise VerifyError(f"layer {layer!r} missing from the {which} graph")
        w = _aligned_layer(g_rec, layer, align, groups)
        if w is None:
            certs.append(_fail(layer, "input channels could not be aligned"))
            continue
        ref = g_ref.nodes[layer].tensors
        certs.append(certify_layer(w, ref["weight"], cfg, g_rec.nodes[layer].tensors["bias"],
                                   ref["bias"], layer))
    ok = sum(c.passed for c in certs)
    return CertificateReport(certs, ok == len(certs), ok, len(certs))


def canonical_weight(g_rec: Graph, layer: str, cert: LayerCertificate, align, groups) -> np.ndarray:
    """Recovered ``layer`` weight mapped into the reference channel order and
    scale, using a passing certificate."""
    w = _aligned_layer(g_rec, layer, align, groups)
    out = np.zeros_like(w)
    for i, (j, s) in enumerate(zip(cert.perm, cert.scales)):
        out[j] = w[i] / s if s > 0 else 0.0
    return out


# -- tier 2 and verdict -------------------------------------------------------

@dataclass
class SimilarityTriplet:
    c: float
    a: float
    r: float

    def __post_init__(self):
        for name in ("c", "a", "r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"similarity {name}={v} outside [0, 1]")


def tier2_pass(trip: SimilarityTriplet, cfg: Tier2Config | None = None) -> bool:
    """PASS iff ``r - a >= lam * max(0, c - a) - delta``."""
    cfg = cfg or Tier2Config()
    drop = max(0.0, trip.c - trip.a)
    return trip.r - trip.a >= cfg.lam * drop - cfg.delta


@dataclass
class VerdictReport:
    layer: str
    c: float
    a: float
    a_degraded: bool
    r_raw: float
    r: float
    tier1: CertificateReport
    tier2: bool
    verdict: str
    passed: bool
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def verify(g_clean: Graph, g_attacked: Graph, g_recovered: Graph, key: WatermarkKey,
           ccfg: CertificateConfig | None = None, t2cfg: Tier2Config | None = None) -> VerdictReport:
    """Tier 1 first; if the certificate fails, fall back to the Tier-2 predicate.

    ``r`` is read from the recovered target after mapping it into the clean
    channel order with the certificate (when it passes), so index-ordered
    extraction sees the reference layout; ``r_raw`` is the read without that
    mapping.
    """
    ccfg = ccfg or CertificateConfig()
    t2cfg = t2cfg or Tier2Config()
    c = extract_similarity(g_clean, key)
    a: Extraction = extract_similarity(g_attacked, key)
    r_raw = extract_similarity(g_recovered, key)
    groups = [grp for grp in merge_groups(g_recovered) if grp.eligible]
    align = align_model(g_recovered, g_clean, ccfg)
    cert = certify_model(g_recovered, g_clean, [key.layer], ccfg, align)
    notes = []
    r = r_raw.similarity
    if cert.passed:
        w = canonical_weight(g_recovered, key.layer, cert.layers[0], align, groups)
        r = similarity_of(w, key).similarity
    else:
        notes.append(cert.layers[0].reason or "certificate failed")
    if a.degraded:
        notes.append(f"attacked read degraded: {a.reason}")
    trip = SimilarityTriplet(c.similarity, a.similarity, r)
    t2 = tier2_pass(trip, t2cfg)
    verdict = "tier1" if cert.passed else ("tier2" if t2 else "fail")
    return VerdictReport(key.layer, trip.c, trip.a, a.degraded, r_raw.similarity, r, cert, t2,
                         verdict, verdict != "fail", notes)
