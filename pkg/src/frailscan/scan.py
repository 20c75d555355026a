"""Stage two: Gaussian scan of the selected frailties.

Under the null the frailty vector is N(alpha 1, s2 A^-1); under the window
alternative the mean is alpha_w on the window and alpha_wc elsewhere. Both
fits are generalised least squares under the precision A and the
log-likelihood ratio reduces to (K/2) log(s2_null / s2_window).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from frailscan import kernels
from frailscan.spatial import WindowSet


class DegenerateFieldError(ValueError):
    """The null residual variance is zero, so every LLR is undefined."""


def _as_mask(w, K):
    w = np.asarray(w)
    if w.dtype == bool:
        return w
    mask = np.zeros(K, dtype=bool)
    mask[w] = True
    return mask


def gls_null_estimates(phi_star, A) -> tuple[float, float]:
    """Common mean and residual variance under the null model."""
    phi = np.asarray(phi_star, dtype=float)
    A = np.asarray(A, dtype=float)
    K = len(phi)
    a1 = A.sum(axis=0)
    one_a_one = a1.sum()
    one_a_phi = a1 @ phi
    alpha = one_a_phi / one_a_one
    r = phi - alpha
    s2 = float(r @ A @ r) / K
    if s2 <= 1e-14 * max(float(phi @ A @ phi), 1.0):
        raise DegenerateFieldError("constant frailty field: null variance is zero")
    return float(alpha), float(s2)


def gls_alt_estimates(phi_star, A, w) -> tuple[float, float, float]:
    """Window mean, outside mean and residual variance under H1(w)."""
    phi = np.asarray(phi_star, dtype=float)
    A = np.asarray(A, dtype=float)
    K = len(phi)
    m = _as_mask(w, K)
    if not m.any() or m.all():
        raise ValueError("window and its complement must both be non-empty")
    iw, ic = m.astype(float), (~m).astype(float)
    a_ww, a_wc, a_cc = iw @ A @ iw, iw @ A @ ic, ic @ A @ ic
    u, v = iw @ A @ phi, ic @ A @ phi
    denom = a_cc - a_wc * a_wc / a_ww
    if abs(denom) <= 1e-14 * max(a_cc, 1.0):
        raise RuntimeError("singular normal equations for the window means")
    alpha_c = (v - u * a_wc / a_ww) / denom
    alpha_w = (u - alpha_c * a_wc) / a_ww
    r = phi - alpha_w * iw - alpha_c * ic
    s2 = max(float(r @ A @ r) / K, 0.0)
    return float(alpha_w), float(alpha_c), s2


@dataclass(frozen=True)
class WindowScore:
    window: int
    alpha_w_hat: float
    alpha_wc_hat: float
    sigma2_w_hat: float
    llr: float
    degenerate: bool = False

    @property
    def direction(self) -> str:
        """``high`` when the window's frailty exceeds the rest (shorter survival)."""
        return "high" if self.alpha_w_hat > self.alpha_wc_hat else "low"


class GaussianScanInput:
    """Selected frailties, the precision at rho* and the windows to scan."""

    def __init__(self, phi_star, A, windows: WindowSet):
        self.phi_star = np.asarray(phi_star, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.windows = windows
        K = len(self.phi_star)
        if self.A.shape != (K, K) or windows.region.n_units != K:
            raise ValueError("phi_star, A and windows disagree on the number of units")
        if np.any(windows.sizes < 1) or np.any(windows.sizes >= K):
            raise ValueError("every window must be a non-empty strict subset")
        self.K = K
        self.a1 = self.A.sum(axis=0)
        self.one_a_one = float(self.a1.sum())
        w = windows
        self.a_ww = kernels.prefix_quadratic(self.A, w.order, w.centers, w.sizes)
        self.a_w1 = kernels.prefix_sums(self.a1, w.order, w.centers, w.sizes)

    def with_phi(self, phi) -> "GaussianScanInput":
        out = object.__new__(GaussianScanInput)
        out.__dict__.update(self.__dict__)
        out.phi_star = np.asarray(phi, dtype=float)
        return out

    def lambda_of(self, phi) -> float:
        """Scan statistic of an arbitrary field over the same windows and A."""
        phi = phi - float(self.a1 @ phi) / self.one_a_one  # centring keeps shifts exact
        aphi = self.A @ phi
        pap, oap = float(phi @ aphi), float(self.a1 @ phi)
        if pap - oap * oap / self.one_a_one <= 1e-14 * max(abs(pap), 1.0):
            raise DegenerateFieldError("constant frailty field: null variance is zero")
        w = self.windows
        llr = kernels.gaussian_llr(aphi, w.order, w.centers, w.sizes, self.a_ww, self.a_w1,
                                   pap, oap, self.one_a_one, self.K)
        return float(llr.max())


@dataclass
class ScanResult:
    lam: float
    mlc: WindowScore
    secondaries: list
    null_params: tuple
    llr: np.ndarray = field(repr=False)

    @property
    def clusters(self) -> list:
        return [self.mlc, *self.secondaries]


def _order_key(windows: WindowSet, llr):
    ids = windows.region.unit_ids
    center_ids = np.array([ids[c] for c in windows.centers])
    # decreasing LLR, then fewer units, then lexical center id
    return np.lexsort((center_ids, windows.sizes, -llr))


def pick_clusters(windows: WindowSet, llr, rule: str = "disjoint", max_secondary: int = 10):
    """MLC index plus greedily chosen secondary windows, in reporting order."""
    if rule not in ("disjoint", "center"):
        raise ValueError(f"unknown secondary rule {rule!r}")
    ranked = _order_key(windows, llr)
    chosen = [int(ranked[0])]
    covered = np.zeros(windows.region.n_units, dtype=bool)
    covered[windows.members(chosen[0])] = True
    for i in ranked[1:]:
        if len(chosen) > max_secondary or not llr[i] > 0:
            break
        m = windows.members(i)
        clash = covered[m].any() if rule == "disjoint" else covered[windows.centers[i]]
        if clash:
            continue
        chosen.append(int(i))
        covered[m] = True
    return chosen


def scan_all(inp: GaussianScanInput, secondary_rule: str = "disjoint",
             max_secondary: int = 10) -> ScanResult:
    """Score every window, take the maximum and collect secondary clusters."""
    phi, K, w = inp.phi_star, inp.K, inp.windows
    alpha0, s2_0 = gls_null_estimates(phi, inp.A)
    phi = phi - alpha0  # centring keeps shifts exact
    aphi = inp.A @ phi
    pap, oap, oao = float(phi @ aphi), float(inp.a1 @ phi), inp.one_a_one
    u = kernels.prefix_sums(aphi, w.order, w.centers, w.sizes)
    a, a1 = inp.a_ww, inp.a_w1
    b = a1 - a
    c = oao - 2 * a1 + a
    v = oap - u
    det = a * c - b * b
    alpha_w = alpha0 + (c * u - b * v) / det
    alpha_c = alpha0 + (a * v - b * u) / det
    q1 = pap - (c * u * u - 2 * b * u * v + a * v * v) / det
    degenerate = q1 < 1e-14 * max(abs(pap), 1.0)
    q1 = np.where(degenerate, 0.0, q1)
    with np.errstate(divide="ignore"):
        llr = 0.5 * K * (np.log(K * s2_0) - np.log(q1))
    chosen = pick_clusters(w, llr, secondary_rule, max_secondary)
    scores = [WindowScore(i, float(alpha_w[i]), float(alpha_c[i]), float(q1[i] / K),
                          float(llr[i]), bool(degenerate[i])) for i in chosen]
    return ScanResult(float(llr[chosen[0]]), scores[0], scores[1:], (alpha0, s2_0), llr)
