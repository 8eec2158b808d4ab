"""Structural obfuscation attacks on a small dataflow IR and their canonical recovery."""

from .attack import AttackConfig, AttackReport, attack, plan_injection
from .graph import Graph, GraphError, Node, build_graph, forward, topo_order
from .kernels import BACKEND
from .motifs import build as build_motif
from .probes import ProbeConfig, make_probes
from .recovery import RecoveryConfig, RecoveryReport, SanityCheckError, recover
from .rng import Rng
from .structure import eligible_producers, merge_groups
from .transform import ChannelTransform
from .verifier import CertificateConfig, Tier2Config, certify_layer, certify_model, tier2_pass, verify
from .watermark import WatermarkKey, embed, extract_similarity, keygen

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackReport", "attack", "plan_injection",
    "Graph", "GraphError", "Node", "build_graph", "forward", "topo_order",
    "BACKEND", "build_motif", "ProbeConfig", "make_probes",
    "RecoveryConfig", "RecoveryReport", "SanityCheckError", "recover", "Rng",
    "eligible_producers", "merge_groups", "ChannelTransform",
    "CertificateConfig", "Tier2Config", "certify_layer", "certify_model", "tier2_pass", "verify",
    "WatermarkKey", "embed", "extract_similarity", "keygen",
]
