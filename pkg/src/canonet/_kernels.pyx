# cython: language_level=3
"""Compiled hot loops. Semantics must match ``_kernels_py`` exactly."""

import numpy as np

from libc.math cimport fabs, sqrt
from libc.stdlib cimport free, malloc, qsort


cdef int _cmp_double(const void *a, const void *b) noexcept nogil:
    cdef double x = (<const double *>a)[0]
    cdef double y = (<const double *>b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


def conv2d(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
           const double[::1] b, int groups, int stride, int padding):
    """Direct cross-correlation.

    Accumulation order per output element: bias first, then input channel
    (within the group), kernel row, kernel column.  Out-of-range taps are
    skipped, which is the same as zero padding.
    """
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0], cin_g = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t h_out = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t w_out = (wd + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t cout_g = c_out // groups
    out = np.empty((c_out, h_out, w_out), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t co, g, oy, ox, ci, ky, kx, iy, ix, base
    cdef double acc
    with nogil:
        for co in range(c_out):
            g = co // cout_g
            base = g * cin_g
            for oy in range(h_out):
                for ox in range(w_out):
                    acc = b[co]
                    for ci in range(cin_g):
                        for ky in range(kh):
                            iy = oy * stride - padding + ky
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride - padding + kx
                                if ix < 0 or ix >= wd:
                                    continue
                                acc = acc + w[co, ci, ky, kx] * x[base + ci, iy, ix]
                    o[co, oy, ox] = acc
    return out


def proportional_pairs(const double[:, ::1] u, double eps, double tau, int t_min):
    """Accepted proportional pairs ``(i, j, alpha)`` with ``i < j``.

    ``alpha`` estimates ``u[j] ~= alpha * u[i]``: the median ratio over probes
    with ``|u[i, t]| > eps``; the pair needs ``t_min`` such probes and a worst
    symmetric relative error ``<= tau`` over all probes.
    """
    cdef Py_ssize_t n = u.shape[0], t_count = u.shape[1]
    cdef Py_ssize_t i, j, t, k
    cdef double alpha, err, num, den, a_u
    cdef double *buf = <double *>malloc(max(t_count, 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    ii, jj, aa = [], [], []
    try:
        for i in range(n):
            for j in range(i + 1, n):
                k = 0
                for t in range(t_count):
                    if fabs(u[i, t]) > eps:
                        buf[k] = u[j, t] / u[i, t]
                        k += 1
                if k < t_min:
                    continue
                qsort(buf, k, sizeof(double), _cmp_double)
                if k % 2 == 1:
                    alpha = buf[k // 2]
                else:
                    alpha = (buf[k // 2 - 1] + buf[k // 2]) / 2.0
                if not alpha > 0.0:
                    continue
                err = 0.0
                for t in range(t_count):
                    a_u = alpha * u[i, t]
                    num = fabs(u[j, t] - a_u)
                    den = fabs(u[j, t])
                    if fabs(a_u) > den:
                        den = fabs(a_u)
                    if eps > den:
                        den = eps
                    if num / den > err:
                        err = num / den
                if err <= tau:
                    ii.append(i)
                    jj.append(j)
                    aa.append(alpha)
    finally:
        free(buf)
    return (np.asarray(ii, dtype=np.int64), np.asarray(jj, dtype=np.int64),
            np.asarray(aa, dtype=np.float64))


def residual_matrix(const double[:, ::1] a, const double[:, ::1] b,
                    double eta, bint allow_scaling):
    """``R[i, j] = ||a_i - s b_j|| / (||b_j|| + eta)`` with ``s = 1``, or with
    scaling allowed the smaller of the residuals at ``s = 1`` and at the
    stabilised best non-negative scale ``<a_i, b_j> / (||b_j||^2 + eta)``."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], length = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s, dot, nb2, acc, acc1, diff
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] r = out
    with nogil:
        for i in range(n):
            for j in range(m):
                nb2 = 0.0
                for k in range(length):
                    nb2 = nb2 + b[j, k] * b[j, k]
                acc1 = 0.0
                for k in range(length):
                    diff = a[i, k] - b[j, k]
                    acc1 = acc1 + diff * diff
                if allow_scaling:
                    dot = 0.0
                    for k in range(length):
                        dot = dot + a[i, k] * b[j, k]
                    s = dot / (nb2 + eta)
                    if s < 0.0:
                        s = 0.0
                    acc = 0.0
                    for k in range(length):
                        diff = a[i, k] - s * b[j, k]
                        acc = acc + diff * diff
                    if acc < acc1:
                        acc1 = acc
                r[i, j] = sqrt(acc1) / (sqrt(nb2) + eta)
    return out


def greedy_match(const double[:, ::1] r, const long[::1] order):
    """Walk ``order`` (flat indices sorted by residual) and keep each pair
    whose row and column are both still free."""
    cdef Py_ssize_t n = r.shape[0], m = r.shape[1]
    cdef Py_ssize_t limit = n if n < m else m
    cdef Py_ssize_t k, flat, i, j, found = 0
    row_used = np.zeros(n, dtype=np.uint8)
    col_used = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] ru = row_used
    cdef unsigned char[::1] cu = col_used
    rows = np.empty(limit, dtype=np.int64)
    cols = np.empty(limit, dtype=np.int64)
    cdef long long[::1] rv = rows
    cdef long long[::1] cv = cols
    with nogil:
        for k in range(order.shape[0]):
            if found == limit:
                break
            flat = order[k]
            i = flat // m
            j = flat % m
            if ru[i] or cu[j]:
                continue
            ru[i] = 1
            cu[j] = 1
            rv[found] = i
            cv[found] = j
            found += 1
    return rows, cols
