import functools

import numpy as np
import pytest

from canonet import motifs
from canonet.probes import ProbeConfig, make_probes


@functools.lru_cache(maxsize=None)
def _motif(name):
    return motifs.build(name, 0)


@pytest.fixture
def motif():
    """Factory returning a fresh copy of a built-in motif (seed 0)."""
    return lambda name: _motif(name).copy()


@pytest.fixture
def probes16():
    return lambda shape: make_probes(ProbeConfig(T=16, seed=99), shape)


def naive_conv(x, w, b, groups=1, stride=1, padding=0):
    """Sliding-window sum written with plain loops; the independent oracle."""
    c_in, h, wd = x.shape
    c_out, cin_g, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    cout_g = c_out // groups
    for co in range(c_out):
        g = co // cout_g
        for oy in range(ho):
            for ox in range(wo):
                s = b[co]
                for ci in range(cin_g):
                    for ky in range(kh):
                        for kx in range(kw):
                            s += w[co, ci, ky, kx] * xp[g * cin_g + ci, oy * stride + ky,
                                                        ox * stride + kx]
                out[co, oy, ox] = s
    return out


def lin(nid, n_in, n_out, seed=0):
    from canonet.rng import Rng
    r = Rng(seed).spawn(nid)
    return {"id": nid, "kind": "Linear", "weight": r.normal((n_out, n_in)).tolist(),
            "bias": r.normal(n_out).tolist()}


def conv(nid, c_in, c_out, k=1, seed=0, **attrs):
    from canonet.rng import Rng
    r = Rng(seed).spawn(nid)
    return {"id": nid, "kind": "Conv2d", "weight": r.normal((c_out, c_in, k, k)).tolist(),
            "bias": r.normal(c_out).tolist(), **attrs}


def chain_edges(*ids):
    return [[a, b, 0] for a, b in zip(ids, ids[1:])]


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
