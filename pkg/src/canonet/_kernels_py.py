"""Numpy implementations of the hot kernels (fallback for ``_kernels``).

Same contracts as the compiled module.  ``conv2d`` and ``residual_matrix``
accumulate through numpy reductions, so their last-ulp rounding can differ
from the compiled direct loops; the other two are order-identical.  Each
output channel of ``conv2d`` is reduced on its own, so identical kernels
give bit-identical channels wherever they sit.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d(x, w, b, groups, stride, padding):
    c_out, cin_g, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cout_g = c_out // groups
    out = np.empty((c_out,) + windows.shape[1:3])
    for co in range(c_out):
        g = co // cout_g
        win = windows[g * cin_g:(g + 1) * cin_g]
        out[co] = np.einsum("ckl,cyxkl->yx", w[co], win)
    return out + b[:, None, None]


def proportional_pairs(u, eps, tau, t_min):
    n = u.shape[0]
    ii, jj, aa = [], [], []
    for i in range(n):
        valid = np.abs(u[i]) > eps
        if valid.sum() < t_min:
            continue
        for j in range(i + 1, n):
            alpha = float(np.median(u[j, valid] / u[i, valid]))
            if not alpha > 0.0:
                continue
            a_u = alpha * u[i]
            den = np.maximum(np.maximum(np.abs(u[j]), np.abs(a_u)), eps)
            err = float(np.max(np.abs(u[j] - a_u) / den))
            if err <= tau:
                ii.append(i)
                jj.append(j)
                aa.append(alpha)
    return (np.asarray(ii, dtype=np.int64), np.asarray(jj, dtype=np.int64),
            np.asarray(aa, dtype=np.float64))


def residual_matrix(a, b, eta, allow_scaling):
    nb2 = np.einsum("jk,jk->j", b, b)
    out = np.empty((a.shape[0], b.shape[0]))
    s = np.maximum(a @ b.T / (nb2 + eta)[None, :], 0.0) if allow_scaling else None
    for i in range(a.shape[0]):
        diff = a[i][None, :] - b
        best = np.einsum("jk,jk->j", diff, diff)
        if allow_scaling:
            diff = a[i][None, :] - s[i][:, None] * b
            best = np.minimum(best, np.einsum("jk,jk->j", diff, diff))
        out[i] = np.sqrt(best)
    return out / (np.sqrt(nb2) + eta)[None, :]


def greedy_match(r, order):
    n, m = r.shape
    limit = min(n, m)
    row_used = np.zeros(n, dtype=bool)
    col_used = np.zeros(m, dtype=bool)
    rows, cols = [], []
    for flat in order:
        if len(rows) == limit:
            break
        i, j = divmod(int(flat), m)
        if row_used[i] or col_used[j]:
            continue
        row_used[i] = col_used[j] = True
        rows.append(i)
        cols.append(j)
    return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
