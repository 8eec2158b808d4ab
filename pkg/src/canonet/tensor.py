"""Forward semantics of every operator in the IR.

Tensors are plain ``float64`` numpy arrays, single sample, channel-first:
``(C, H, W)`` for feature maps and ``(N,)`` for vectors.  All functions are
pure and return new arrays.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes disagree; ``dim`` names the offending dimension."""

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0 or 0 in arr.shape:
        raise ShapeError("tensors must have positive extents", dim="shape")
    return arr


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}", dim="stride")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}", dim="padding")
    if h + 2 * padding < kh:
        raise ShapeError(f"kernel height {kh} exceeds padded input height {h + 2 * padding}",
                         dim="kh")
    if w + 2 * padding < kw:
        raise ShapeError(f"kernel width {kw} exceeds padded input width {w + 2 * padding}",
                         dim="kw")
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def conv2d_forward(x, weight, bias, groups: int = 1, stride: int = 1, padding: int = 0):
    """Grouped 2-D cross-correlation of a ``(C_in, H, W)`` input."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = as_tensor(bias)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), got {x.shape}", dim="input.ndim")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {weight.shape}", dim="weight.ndim")
    c_in = x.shape[0]
    c_out, cin_g, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}",
                         dim="groups")
    if cin_g * groups != c_in:
        raise ShapeError(f"weight expects {cin_g * groups} input channels, input has {c_in}",
                         dim="C_in")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)", dim="C_out")
    conv_output_hw(x.shape[1], x.shape[2], kh, kw, stride, padding)
    return kernels.conv2d(x, weight, bias, groups, stride, padding)


def linear_forward(x, weight, bias):
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = as_tensor(bias)
    if x.ndim != 1:
        raise ShapeError(f"linear input must be a vector, got {x.shape}", dim="input.ndim")
    if weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"weight {weight.shape} does not accept input of length {x.shape[0]}",
                         dim="N")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)", dim="M")
    # a 1x1 convolution, so every row accumulates in the same fixed order
    return kernels.conv2d(x[:, None, None], weight[:, :, None, None], bias)[:, 0, 0]


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps: float = 1e-5):
    """Eval-mode batch norm over the leading (channel) axis."""
    x = as_tensor(x)
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}", dim="eps")
    c = x.shape[0]
    params = [np.asarray(p, dtype=np.float64) for p in (gamma, beta, running_mean, running_var)]
    for name, p in zip(("gamma", "beta", "running_mean", "running_var"), params):
        if p.shape != (c,):
            raise ShapeError(f"{name} shape {p.shape} != ({c},)", dim="C")
    gamma, beta, mean, var = params
    if np.any(var < 0):
        raise ValueError("running_var must be non-negative")
    expand = (slice(None),) + (None,) * (x.ndim - 1)
    scale = gamma / np.sqrt(var + eps)
    return (x - mean[expand]) * scale[expand] + beta[expand]


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}", dim="shape")
    return a + b


def cat_channels(tensors):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("cat needs at least one operand", dim="arity")
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise ShapeError(f"cat operands disagree on spatial dims: {tail} vs {t.shape[1:]}",
                             dim="HW")
    return np.concatenate(tensors, axis=0)


def avgpool_global(x):
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"global pooling needs (C, H, W), got {x.shape}", dim="input.ndim")
    return x.mean(axis=(1, 2))


def flatten(x):
    """Channel-major flattening: channel varies slowest."""
    return as_tensor(x).reshape(-1).copy()
