# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled window-sweep kernels; see ``_kernels_py`` for the reference versions."""
import numpy as np
from libc.math cimport log, fabs, INFINITY


def prefix_sums(values, const Py_ssize_t[:, ::1] order,
                const Py_ssize_t[::1] centers, const Py_ssize_t[::1] sizes):
    values = np.ascontiguousarray(values, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    cdef const double[:, ::1] v = values
    cdef Py_ssize_t nw = centers.shape[0], m = v.shape[1]
    out_arr = np.zeros((nw, m))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] acc = np.zeros(m)
    cdef Py_ssize_t w, j, u, pos = 0, cur = -1
    for w in range(nw):
        if centers[w] != cur:
            cur = centers[w]
            pos = 0
            for j in range(m):
                acc[j] = 0.0
        while pos < sizes[w]:
            u = order[cur, pos]
            for j in range(m):
                acc[j] += v[u, j]
            pos += 1
        for j in range(m):
            out[w, j] = acc[j]
    if squeeze:
        return out_arr[:, 0]
    return out_arr


def prefix_quadratic(M, const Py_ssize_t[:, ::1] order,
                     const Py_ssize_t[::1] centers, const Py_ssize_t[::1] sizes):
    cdef const double[:, ::1] mat = np.ascontiguousarray(M, dtype=np.float64)
    cdef Py_ssize_t nw = centers.shape[0], k = mat.shape[0]
    out_arr = np.zeros(nw)
    cdef double[::1] out = out_arr
    # running M @ 1_w
    cdef double[::1] col = np.zeros(k)
    cdef double q = 0.0
    cdef Py_ssize_t w, j, u, pos = 0, cur = -1
    for w in range(nw):
        if centers[w] != cur:
            cur = centers[w]
            pos = 0
            q = 0.0
            for j in range(k):
                col[j] = 0.0
        while pos < sizes[w]:
            u = order[cur, pos]
            q += 2.0 * col[u] + mat[u, u]
            for j in range(k):
                col[j] += mat[j, u]
            pos += 1
        out[w] = q
    return out_arr


def gaussian_llr(aphi, const Py_ssize_t[:, ::1] order,
                 const Py_ssize_t[::1] centers, const Py_ssize_t[::1] sizes,
                 const double[::1] a_ww, const double[::1] a_w1,
                 double phi_a_phi, double one_a_phi, double one_a_one,
                 Py_ssize_t n_units):
    cdef const double[::1] ap = np.ascontiguousarray(aphi, dtype=np.float64)
    cdef Py_ssize_t nw = centers.shape[0]
    out_arr = np.zeros(nw)
    cdef double[::1] out = out_arr
    cdef double u = 0.0, a, b, c, v, det, fit, q1
    cdef double q0 = phi_a_phi - one_a_phi * one_a_phi / one_a_one
    cdef double scale = fabs(phi_a_phi)
    if scale < 1.0:
        scale = 1.0
    cdef Py_ssize_t w, pos = 0, cur = -1
    for w in range(nw):
        if centers[w] != cur:
            cur = centers[w]
            pos = 0
            u = 0.0
        while pos < sizes[w]:
            u += ap[order[cur, pos]]
            pos += 1
        a = a_ww[w]
        b = a_w1[w] - a
        c = one_a_one - 2.0 * a_w1[w] + a
        v = one_a_phi - u
        det = a * c - b * b
        fit = (c * u * u - 2.0 * b * u * v + a * v * v) / det
        q1 = phi_a_phi - fit
        if q1 < 1e-14 * scale:
            out[w] = INFINITY
        else:
            out[w] = 0.5 * n_units * (log(q0) - log(q1))
    return out_arr


def logrank_pair_matrix(const Py_ssize_t[::1] units, const double[::1] weights,
                        const double[::1] g, Py_ssize_t n_units):
    cdef Py_ssize_t n = units.shape[0], i, j, k
    m_arr = np.zeros((n_units, n_units))
    cdef double[:, ::1] m = m_arr
    cdef double[::1] after = np.zeros(n_units)
    cdef double gw
    for i in range(n - 1, -1, -1):
        k = units[i]
        gw = g[i] * weights[i]
        if gw != 0.0:
            for j in range(n_units):
                m[k, j] += gw * after[j]
        after[k] += weights[i]
    for i in range(n_units):
        for j in range(i + 1, n_units):
            m[i, j] += m[j, i]
            m[j, i] = m[i, j]
        m[i, i] *= 2.0
    for i in range(n):
        k = units[i]
        m[k, k] += g[i] * weights[i] * weights[i]
    return m_arr
