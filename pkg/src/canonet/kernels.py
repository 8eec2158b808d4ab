"""Kernel backend selection.

The compiled ``_kernels`` extension is used when importable; set
``CANONET_PURE_PYTHON=1`` to force the numpy fallback.  ``BACKEND`` names the
active one.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("CANONET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"


def conv2d(x, w, b, groups=1, stride=1, padding=0, impl=None):
    impl = impl or _impl
    return impl.conv2d(np.ascontiguousarray(x, dtype=np.float64),
                       np.ascontiguousarray(w, dtype=np.float64),
                       np.ascontiguousarray(b, dtype=np.float64),
                       int(groups), int(stride), int(padding))


def proportional_pairs(u, eps, tau, t_min, impl=None):
    impl = impl or _impl
    return impl.proportional_pairs(np.ascontiguousarray(u, dtype=np.float64),
                                   float(eps), float(tau), int(t_min))


def residual_matrix(a, b, eta, allow_scaling, impl=None):
    impl = impl or _impl
    return impl.residual_matrix(np.ascontiguousarray(a, dtype=np.float64),
                                np.ascontiguousarray(b, dtype=np.float64),
                                float(eta), bool(allow_scaling))


def greedy_match(r, impl=None):
    """Greedy one-to-one matching: repeatedly take the globally smallest
    remaining entry; ties go to the lower flat (row-major) index."""
    impl = impl or _impl
    r = np.ascontiguousarray(r, dtype=np.float64)
    order = np.argsort(r, axis=None, kind="stable").astype(np.int_)
    return impl.greedy_match(r, np.ascontiguousarray(order))
