"""Pure numpy implementations of the window-sweep kernels.

Every candidate window is a prefix ``order[center, :size]`` of the
distance ordering of its center, and windows are sorted by center then
size. The compiled module ``_kernels`` exposes the same functions.
"""
import numpy as np

# caps the (centers, L, L) temporary of prefix_quadratic
_QUAD_CHUNK_ELEMS = 4_000_000


def prefix_sums(values, order, centers, sizes):
    values = np.ascontiguousarray(values, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    if len(centers) == 0:
        out = np.zeros((0, values.shape[1]))
        return out[:, 0] if squeeze else out
    L = int(sizes.max())
    ucent, inv = np.unique(centers, return_inverse=True)
    cum = np.cumsum(values[order[ucent, :L]], axis=1)
    out = cum[inv, sizes - 1]
    return out[:, 0] if squeeze else out


def prefix_quadratic(M, order, centers, sizes):
    M = np.asarray(M, dtype=np.float64)
    out = np.empty(len(centers))
    if len(centers) == 0:
        return out
    ucent, inv = np.unique(centers, return_inverse=True)
    L = int(sizes.max())
    step = max(1, _QUAD_CHUNK_ELEMS // (L * L))
    diag = np.empty((len(ucent), L))
    idx = np.arange(L)
    for s in range(0, len(ucent), step):
        o = order[ucent[s:s + step], :L]
        sub = M[o[:, :, None], o[:, None, :]]
        sub = np.cumsum(np.cumsum(sub, axis=1), axis=2)
        diag[s:s + step] = sub[:, idx, idx]
    out[:] = diag[inv, sizes - 1]
    return out


def gaussian_llr(aphi, order, centers, sizes, a_ww, a_w1, phi_a_phi, one_a_phi,
                 one_a_one, n_units):
    """Per-window LLR for the two-mean Gaussian model under precision A.

    ``a_ww`` and ``a_w1`` hold 1_w'A1_w and 1_w'A1 per window; ``aphi`` is
    A @ phi. Degenerate windows (zero residual) return +inf.
    """
    u = prefix_sums(aphi, order, centers, sizes)
    return _llr_from_moments(u, a_ww, a_w1, phi_a_phi, one_a_phi, one_a_one,
                             n_units)


def _llr_from_moments(u, a, a1, pap, oap, oao, n_units):
    b = a1 - a
    c = oao - 2.0 * a1 + a
    v = oap - u
    det = a * c - b * b
    fit = (c * u * u - 2.0 * b * u * v + a * v * v) / det
    q1 = pap - fit
    q0 = pap - oap * oap / oao
    scale = max(abs(pap), 1.0)
    q1 = np.where(q1 < 1e-14 * scale, 0.0, q1)
    with np.errstate(divide="ignore"):
        llr = 0.5 * n_units * (np.log(q0) - np.log(q1))
    return llr


def logrank_pair_matrix(units, weights, g, n_units):
    """M[k, l] = sum over pairs (i in k, j in l) of w_i w_j g(min(T_i, T_j)).

    Inputs are ordered by increasing observation time; ``g`` is the
    cumulative quadratic log-rank weight at each individual's time.
    """
    units = np.asarray(units, dtype=np.intp)
    n = len(units)
    onehot = np.zeros((n, n_units))
    onehot[np.arange(n), units] = weights
    after = np.cumsum(onehot[::-1], axis=0)[::-1]
    after = np.vstack([after[1:], np.zeros((1, n_units))])
    t = (onehot * g[:, None]).T @ after
    m = t + t.T
    m[np.diag_indices(n_units)] += np.bincount(
        units, weights=g * weights * weights, minlength=n_units)
    return m
