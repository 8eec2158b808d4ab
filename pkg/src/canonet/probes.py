"""Deterministic probe inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

DEFAULT_PROBE_SEED = 0xC0FFEE


@dataclass
class ProbeConfig:
    T: int = 32
    value_range: tuple[float, float] = (-1.0, 1.0)
    seed: int = DEFAULT_PROBE_SEED
    batch_hint: int = 1

    def __post_init__(self):
        lo, hi = self.value_range
        self.value_range = (float(lo), float(hi))
        if self.T < 1:
            raise ValueError("need at least one probe")
        if not lo < hi:
            raise ValueError(f"empty probe range {self.value_range}")


def make_probes(cfg: ProbeConfig, input_shape) -> list[np.ndarray]:
    """``cfg.T`` i.i.d. uniform tensors of ``input_shape``."""
    rng = Rng(cfg.seed)
    lo, hi = cfg.value_range
    return [rng.uniform(lo, hi, tuple(input_shape)) for _ in range(cfg.T)]
