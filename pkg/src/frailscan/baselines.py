"""Classical survival scan statistics used as comparators.

* exponential: likelihood ratio of an exponential model with one rate
  inside the window and another outside;
* logrank: two-group log-rank chi-square, inside against outside.

Both are assessed by random labelling: the unit labels of individuals are
permuted, carrying each individual's (time, event, covariates) record.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from frailscan import kernels
from frailscan.inference import pvalue, replicate_rng
from frailscan.scan import pick_clusters
from frailscan.spatial import WindowSet
from frailscan.survdata import SurvivalDataset

METHODS = ("exponential", "logrank")


class MethodError(ValueError):
    """The data cannot support the requested baseline statistic."""


class AdjustmentError(RuntimeError):
    """A covariate regression failed to converge."""


@dataclass
class BaselineScanResult:
    method: str
    mlc: int
    statistic: float
    p_value: float
    secondaries: list
    stats: np.ndarray = field(repr=False)
    null_stats: np.ndarray = field(repr=False)

    @property
    def clusters(self) -> list:
        """(window, statistic, p-value) for the MLC then each secondary."""
        return [(self.mlc, self.statistic, self.p_value), *self.secondaries]


# -- regressions ---------------------------------------------------------

def _newton(fun, x0, max_iter=100, tol=1e-9, what="regression"):
    x = np.array(x0, dtype=float)
    f, g, H = fun(x)
    for _ in range(max_iter):
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            fn, gn, Hn = fun(x + t * step)
            if np.isfinite(fn) and fn >= f - 1e-12 * abs(f):
                break
            t *= 0.5
            if t < 1e-10:
                raise AdjustmentError(f"{what}: line search failed")
        x, f, g, H = x + t * step, fn, gn, Hn
        if np.max(np.abs(g)) < tol * max(1.0, abs(f)) or np.max(np.abs(t * step)) < 1e-12:
            return x, f, H
    raise AdjustmentError(f"{what} did not converge in {max_iter} iterations")


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray
    se: np.ndarray
    loglik: float


def exponential_regression(time, event, Z) -> RegressionFit:
    """Exponential model with log rate intercept + Z @ beta; coef[0] is the intercept."""
    time, event = np.asarray(time, float), np.asarray(event, float)
    X = np.column_stack([np.ones(len(time)), np.asarray(Z, float).reshape(len(time), -1)])

    def fun(b):
        eta = X @ b
        mu = time * np.exp(eta)
        H = X.T @ (mu[:, None] * X)
        return float(event @ eta - mu.sum()), X.T @ (event - mu), H

    if event.sum() == 0:
        raise AdjustmentError("exponential regression needs at least one event")
    b0 = np.zeros(X.shape[1])
    b0[0] = math.log(event.sum() / time.sum())
    b, f, H = _newton(fun, b0, what="exponential regression")
    return RegressionFit(b, np.sqrt(np.diag(np.linalg.inv(H))), f)


def cox_regression(time, event, Z, offset=None) -> RegressionFit:
    """Cox partial likelihood with Breslow ties."""
    time, event = np.asarray(time, float), np.asarray(event, float)
    Z = np.asarray(Z, float).reshape(len(time), -1)
    off = np.zeros(len(time)) if offset is None else np.asarray(offset, float)
    order = np.argsort(-time, kind="stable")
    td, dd, Zd, od = time[order], event[order], Z[order], off[order]
    # last position of each risk set in the descending ordering
    last = np.searchsorted(-td, -td, side="right") - 1
    ev = dd > 0
    Ze = Zd[ev]

    def fun(b):
        eta = Zd @ b + od
        r = np.exp(eta - eta.max())
        s0 = np.cumsum(r)[last][ev]
        s1 = np.cumsum(r[:, None] * Zd, axis=0)[last][ev]
        s2 = np.cumsum(r[:, None, None] * Zd[:, :, None] * Zd[:, None, :], axis=0)[last][ev]
        m = s1 / s0[:, None]
        f = float(eta[ev].sum() - (np.log(s0) + eta.max()).sum())
        g = (Ze - m).sum(axis=0)
        H = (s2 / s0[:, None, None]).sum(axis=0) - m.T @ m
        return f, g, H

    if not ev.any():
        raise AdjustmentError("Cox regression needs at least one event")
    b, f, H = _newton(fun, np.zeros(Z.shape[1]), what="Cox regression")
    return RegressionFit(b, np.sqrt(np.diag(np.linalg.inv(H))), f)


@dataclass(frozen=True)
class Adjustment:
    """Covariate handling for a baseline: adjusted times or log-rank weights."""

    method: str
    beta: np.ndarray
    se: np.ndarray
    time: np.ndarray | None = None
    weights: np.ndarray | None = None


def adjust_covariates(dataset: SurvivalDataset, method: str) -> Adjustment:
    """Estimate covariate effects once, without any cluster term.

    ``exponential`` rescales each time by exp(beta'z) from an exponential
    regression; ``logrank`` keeps exp(beta'z) from a null Cox fit as
    weights inside every window statistic.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if dataset.p < 1:
        raise ValueError("covariate adjustment needs at least one covariate")
    Z = dataset.covariates - dataset.covariates.mean(axis=0)
    keep = Z.std(axis=0) > 0
    beta = np.zeros(dataset.p)
    se = np.full(dataset.p, np.nan)
    if method == "exponential":
        if keep.any():
            fit = exponential_regression(dataset.time, dataset.event, Z[:, keep])
            beta[keep], se[keep] = fit.coef[1:], fit.se[1:]
        return Adjustment(method, beta, se, time=dataset.time * np.exp(Z @ beta))
    if keep.any():
        fit = cox_regression(dataset.time, dataset.event, Z[:, keep])
        beta[keep], se[keep] = fit.coef, fit.se
    return Adjustment(method, beta, se, weights=np.exp(Z @ beta))


def cluster_hazard_ratio(dataset: SurvivalDataset, member_units) -> tuple[float, float, float]:
    """Hazard ratio (and 95% interval) of a cluster indicator in a Cox model with the covariates."""
    inside = np.isin(dataset.unit, np.asarray(member_units)).astype(float)
    Z = np.column_stack([inside, dataset.covariates - dataset.covariates.mean(axis=0)])
    Z = Z[:, np.r_[True, Z[:, 1:].std(axis=0) > 0]]
    fit = cox_regression(dataset.time, dataset.event, Z)
    b, se = fit.coef[0], fit.se[0]
    return float(np.exp(b)), float(np.exp(b - 1.96 * se)), float(np.exp(b + 1.96 * se))


# -- statistics ----------------------------------------------------------

class _ExponentialStat:
    def __init__(self, time, event, windows: WindowSet):
        self.time, self.event, self.w = time, event.astype(float), windows
        self.d, self.S = self.event.sum(), time.sum()
        if self.d == 0:
            raise MethodError("exponential scan needs at least one event")
        self.base = self.d * math.log(self.d / self.S)

    def __call__(self, unit):
        K = self.w.region.n_units
        vals = np.column_stack([np.bincount(unit, weights=self.event, minlength=K),
                                np.bincount(unit, weights=self.time, minlength=K)])
        w = self.w
        sums = kernels.prefix_sums(vals, w.order, w.centers, w.sizes)
        return exponential_llr(sums[:, 0], sums[:, 1], self.d, self.S)


def exponential_llr(d_in, s_in, d_total, s_total):
    """Two-rate exponential log-likelihood ratio; 0 when either side has no events."""
    d_in, s_in = np.asarray(d_in, float), np.asarray(s_in, float)
    d_out, s_out = d_total - d_in, s_total - s_in
    ok = (d_in > 0) & (d_out > 0)
    out = np.zeros(len(d_in))
    di, si, do, so = d_in[ok], s_in[ok], d_out[ok], s_out[ok]
    out[ok] = di * np.log(di / si) + do * np.log(do / so) - d_total * math.log(d_total / s_total)
    return np.maximum(out, 0.0)


class _LogrankStat:
    """Window log-rank chi-squares through per-unit moments.

    With at-risk weights S0_j, S1w_j at event times t_j, the variance
    sum_j d_j c_j p_j (1 - p_j), p_j = S1w_j / S0_j, splits into a term
    linear in the window's individuals and a quadratic form 1_w' M 1_w.
    """

    def __init__(self, time, event, windows: WindowSet, weights=None):
        n = len(time)
        self.w = windows
        wts = np.ones(n) if weights is None else np.asarray(weights, float)
        self.order = np.argsort(time, kind="stable")
        t, d, wt = time[self.order], event[self.order].astype(float), wts[self.order]
        if d.sum() == 0:
            raise MethodError("log-rank scan needs at least one event")
        uniq, first = np.unique(t, return_index=True)
        # at-risk sums at each distinct time: everything from its first position on
        s0 = np.cumsum(wt[::-1])[::-1][first]
        n_risk = n - first
        dj = np.add.reduceat(d, first)
        cj = np.where(n_risk > 1, (n_risk - dj) / np.maximum(n_risk - 1, 1), 1.0)
        inc_e = dj / s0
        inc_v = dj * cj / s0
        inc_g = dj * cj / (s0 * s0)
        pos = np.searchsorted(uniq, t)
        self.O = d
        self.E = wt * np.cumsum(inc_e)[pos]
        self.Vlin = wt * np.cumsum(inc_v)[pos]
        self.G = np.ascontiguousarray(np.cumsum(inc_g)[pos])
        self.wt = np.ascontiguousarray(wt)
        self.d_total = d.sum()

    def moments(self, unit):
        """Per-window observed, expected and variance."""
        K = self.w.region.n_units
        u = np.ascontiguousarray(unit[self.order], dtype=np.intp)
        vals = np.column_stack([np.bincount(u, weights=self.O, minlength=K),
                                np.bincount(u, weights=self.E, minlength=K),
                                np.bincount(u, weights=self.Vlin, minlength=K)])
        w = self.w
        sums = kernels.prefix_sums(vals, w.order, w.centers, w.sizes)
        M = kernels.logrank_pair_matrix(u, self.wt, self.G, K)
        quad = kernels.prefix_quadratic(M, w.order, w.centers, w.sizes)
        return sums[:, 0], sums[:, 1], sums[:, 2] - quad

    def __call__(self, unit):
        O, E, V = self.moments(unit)
        ok = (O > 0) & (O < self.d_total) & (V > 1e-12)
        out = np.zeros(len(O))
        out[ok] = (O[ok] - E[ok]) ** 2 / V[ok]
        return out


def _run(stat, dataset, windows, method, M, seed, max_secondary):
    if len(windows) == 0:
        raise MethodError("no candidate windows")
    obs = stat(dataset.unit)
    null = np.empty(M)
    for m in range(M):
        perm = replicate_rng(seed, m).permutation(dataset.unit)
        null[m] = stat(perm).max()
    chosen = pick_clusters(windows, obs, "disjoint", max_secondary)
    pv = [pvalue(obs[i], null) for i in chosen]
    sec = [(i, float(obs[i]), p) for i, p in zip(chosen[1:], pv[1:])]
    return BaselineScanResult(method, chosen[0], float(obs[chosen[0]]), pv[0], sec, obs, null)


def exponential_scan(dataset: SurvivalDataset, windows: WindowSet, M: int = 999,
                     seed: int = 0, adjustment: Adjustment | None = None,
                     max_secondary: int = 10) -> BaselineScanResult:
    time = dataset.time if adjustment is None else adjustment.time
    stat = _ExponentialStat(time, dataset.event, windows)
    return _run(stat, dataset, windows, "exponential", M, seed, max_secondary)


def logrank_scan(dataset: SurvivalDataset, windows: WindowSet, M: int = 999,
                 seed: int = 0, adjustment: Adjustment | None = None,
                 max_secondary: int = 10) -> BaselineScanResult:
    weights = None if adjustment is None else adjustment.weights
    stat = _LogrankStat(dataset.time, dataset.event, windows, weights)
    return _run(stat, dataset, windows, "logrank", M, seed, max_secondary)
