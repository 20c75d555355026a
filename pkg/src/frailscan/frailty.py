"""Stage one: Laplace-approximate Bayesian fits of the spatial frailty model.

The Cox model with piecewise-constant baseline is fitted as a Poisson
log-linear model on the piecewise expansion. The latent field is

    x = (c_1..c_nT, X_1..X_K, beta_1..beta_p, alpha_w)

with a first-order random walk on ``c`` (precision ``tau``, diffuse anchor
on ``c_1``), a Leroux CAR prior on ``X`` and a flat prior on ``beta``.
For fixed hyperparameters the latent posterior is replaced by its Gaussian
approximation at the mode; the hyperparameters (logit rho, log sigma2,
log tau) are set to the maximiser of the Laplace-approximated marginal
posterior, and the model evidence adds a Gaussian volume term around it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import betaln, expit, gammaln, logit, logsumexp

from frailscan.spatial import ICAR_RHO, StudyRegion, WindowSet, build_neighbor_matrix
from frailscan.survdata import PiecewiseGrid, SurvivalDataset, expand_piecewise

log = logging.getLogger(__name__)

MODELS = ("car", "iid", "icar")
RHO_BOUNDS = (1e-4, ICAR_RHO)
LOG_SIGMA2_BOUNDS = (math.log(1e-4), math.log(1e2))
LOG_TAU_BOUNDS = (math.log(1e-3), math.log(1e5))
HYPER_START = (0.5, 1.0, 10.0)


class FitError(RuntimeError):
    """Newton iterations for the latent mode did not converge."""

    def __init__(self, message, window=None):
        super().__init__(message if window is None else f"{message} (window {window})")
        self.window = window


class DataError(ValueError):
    """The likelihood is not finite for the supplied data."""


@dataclass(frozen=True)
class PriorSpec:
    """Hyperpriors; precisions get Gamma(shape, rate), rho gets Beta(a, b)."""

    rho_a: float = 1.0
    rho_b: float = 1.0
    prec_shape: float = 1e-3
    prec_rate: float = 1e-3
    tau_shape: float = 1e-3
    tau_rate: float = 1e-3
    alpha_var: float = 1e3
    anchor_var: float = 1e3

    def __post_init__(self):
        for name in ("rho_a", "rho_b", "prec_shape", "prec_rate", "tau_shape",
                     "tau_rate", "alpha_var", "anchor_var"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class LatentField:
    c: np.ndarray
    X: np.ndarray
    alpha_w: float | None = None


@dataclass(frozen=True)
class ModelFit:
    hypothesis: str
    window: int | None
    posterior_mode: LatentField
    hyper_map: dict
    beta_hat: np.ndarray
    log_marginal: float
    log_lik_laplace: float
    newton_iterations: int
    n_evaluations: int

    @property
    def posterior_mean(self) -> LatentField:
        # Gaussian approximation: mean equals mode
        return self.posterior_mode

    @property
    def rho(self) -> float:
        return self.hyper_map["rho"]


@dataclass
class FrailtySelection:
    phi_star: np.ndarray
    rho_star: float
    winner: str
    winner_window: int | None
    bf_ledger: dict
    alpha_hat_wstar: float | None
    null_fit: ModelFit
    winner_fit: ModelFit
    refined: dict = field(default_factory=dict)
    threshold: float = 30.0

    def diagnostics(self, windows: WindowSet | None = None) -> dict:
        def fit_info(fit):
            return {"hypothesis": fit.hypothesis, "hyper_map": fit.hyper_map,
                    "log_marginal": fit.log_marginal,
                    "newton_iterations": fit.newton_iterations,
                    "evaluations": fit.n_evaluations,
                    "beta_hat": fit.beta_hat.tolist()}
        out = {"winner": self.winner, "rho_star": self.rho_star,
               "rho_null": self.null_fit.rho, "rho_winner": self.winner_fit.rho,
               "bf_threshold": self.threshold, "null_fit": fit_info(self.null_fit),
               "refined_fits": {str(i): fit_info(f) for i, f in self.refined.items()}}
        ledger = []
        for i, lbf in sorted(self.bf_ledger.items()):
            entry = {"window": int(i), "log_bf": float(lbf),
                     "refined": i in self.refined}
            if windows is not None:
                entry["members"] = list(windows.member_ids(i))
            ledger.append(entry)
        out["bf_ledger"] = ledger
        return out


def _rw1_structure(n_t: int) -> np.ndarray:
    D = np.diff(np.eye(n_t), axis=0)
    return D.T @ D


class LatentProblem:
    """Penalised Poisson likelihood for one hypothesis over fixed data.

    ``window_units`` adds the cluster effect for those units; ``beta_fixed``
    moves the covariate term into the offset so the data aggregate to
    (interval, unit) cells.
    """

    def __init__(self, dataset: SurvivalDataset, region: StudyRegion, grid: PiecewiseGrid,
                 priors: PriorSpec = PriorSpec(), window_units=None, beta_fixed=None,
                 R: np.ndarray | None = None, records=None):
        self.priors = priors
        self.K = region.n_units
        self.n_t = grid.n_intervals
        self.R = build_neighbor_matrix(region) if R is None else R
        self.R_eig = np.linalg.eigvalsh(self.R)
        self.rw = _rw1_structure(self.n_t)
        rec = expand_piecewise(dataset, grid) if records is None else records
        z = dataset.covariates[rec.individual]
        if beta_fixed is not None:
            beta_fixed = np.asarray(beta_fixed, dtype=float)
            if beta_fixed.shape != (dataset.p,):
                raise ValueError(f"beta_fixed must have length {dataset.p}")
        if beta_fixed is not None or dataset.p == 0:
            offset = z @ beta_fixed if dataset.p else np.zeros(len(rec))
            cell = rec.interval * self.K + rec.unit
            n_cells = self.n_t * self.K
            E = np.bincount(cell, weights=rec.exposure * np.exp(offset), minlength=n_cells)
            d = np.bincount(cell, weights=rec.event, minlength=n_cells)
            keep = E > 0
            self.cell = np.flatnonzero(keep)
            self.E, self.d = E[keep], d[keep]
            self.Z = np.zeros((len(self.cell), 0))
        else:
            self.cell = rec.interval * self.K + rec.unit
            self.E = rec.exposure.astype(float)
            self.d = rec.event.astype(float)
            self.Z = z
        if not np.all(np.isfinite(self.E)) or np.any(self.E <= 0):
            raise DataError("non-finite or zero exposure in the piecewise expansion")
        self.I = self.cell // self.K
        self.k = self.cell % self.K
        self.p = self.Z.shape[1]
        self.w = None
        if window_units is not None:
            self.w = np.zeros(self.K, dtype=bool)
            self.w[np.asarray(window_units)] = True
        self.n = self.n_t + self.K + self.p + (self.w is not None)
        self.sl_c = slice(0, self.n_t)
        self.sl_x = slice(self.n_t, self.n_t + self.K)
        self.sl_b = slice(self.n_t + self.K, self.n_t + self.K + self.p)
        # rows entering the Laplace determinant (beta is profiled, not integrated)
        self.integrated = np.r_[np.arange(self.n_t + self.K),
                                np.arange(self.n_t + self.K + self.p, self.n)]
        base = self.d.sum() / self.E.sum()
        self.x = np.zeros(self.n)
        self.x[self.sl_c] = math.log(base) if base > 0 else -5.0

    # -- pieces ---------------------------------------------------------
    def eta(self, x):
        e = x[self.sl_c][self.I] + x[self.sl_x][self.k]
        if self.p:
            e = e + self.Z @ x[self.sl_b]
        if self.w is not None:
            e = e + x[-1] * self.w[self.k]
        return e

    def prior_precision(self, rho, sigma2, tau):
        pr = self.priors
        Q = np.zeros((self.n, self.n))
        Qc = tau * self.rw
        Qc[0, 0] += 1.0 / pr.anchor_var
        Q[self.sl_c, self.sl_c] = Qc
        Q[self.sl_x, self.sl_x] = (rho * self.R + (1.0 - rho) * np.eye(self.K)) / sigma2
        if self.w is not None:
            Q[-1, -1] = 1.0 / pr.alpha_var
        logdet = (-math.log(pr.anchor_var) + (self.n_t - 1) * math.log(tau)
                  + np.log(rho * self.R_eig + 1.0 - rho).sum() - self.K * math.log(sigma2))
        if self.w is not None:
            logdet -= math.log(pr.alpha_var)
        return Q, logdet

    def _cells(self, v):
        return np.bincount(self.cell, weights=v, minlength=self.n_t * self.K).reshape(
            self.n_t, self.K)

    def gradient_hessian(self, x, Q):
        """Gradient and negative Hessian of the log posterior (up to constants)."""
        eta = self.eta(x)
        mu = self.E * np.exp(eta)
        r = self.d - mu
        cr = self._cells(r)
        cm = self._cells(mu)
        g = np.empty(self.n)
        g[self.sl_c] = cr.sum(axis=1)
        g[self.sl_x] = cr.sum(axis=0)
        H = np.zeros((self.n, self.n))
        mc, mx = cm.sum(axis=1), cm.sum(axis=0)
        ic = np.arange(self.n_t)
        ix = np.arange(self.n_t, self.n_t + self.K)
        H[ic, ic] = mc
        H[ix, ix] = mx
        H[self.sl_c, self.sl_x] = cm
        H[self.sl_x, self.sl_c] = cm.T
        if self.p:
            g[self.sl_b] = self.Z.T @ r
            mz = mu[:, None] * self.Z
            H[self.sl_b, self.sl_b] = self.Z.T @ mz
            Hcb = np.stack([np.bincount(self.I, weights=mz[:, j], minlength=self.n_t)
                            for j in range(self.p)], axis=1)
            Hxb = np.stack([np.bincount(self.k, weights=mz[:, j], minlength=self.K)
                            for j in range(self.p)], axis=1)
            H[self.sl_c, self.sl_b] = Hcb
            H[self.sl_b, self.sl_c] = Hcb.T
            H[self.sl_x, self.sl_b] = Hxb
            H[self.sl_b, self.sl_x] = Hxb.T
        if self.w is not None:
            w = self.w
            g[-1] = cr.sum(axis=0)[w].sum()
            H[-1, -1] = mx[w].sum()
            H[-1, self.sl_c] = H[self.sl_c, -1] = cm[:, w].sum(axis=1)
            H[-1, self.sl_x] = H[self.sl_x, -1] = mx * w
            if self.p:
                H[-1, self.sl_b] = H[self.sl_b, -1] = mz[w[self.k]].sum(axis=0)
        g -= Q @ x
        H += Q
        return g, H, eta, mu

    def log_posterior(self, x, Q, eta=None):
        if eta is None:
            eta = self.eta(x)
        return float(self.d @ eta - self.E @ np.exp(eta) - 0.5 * x @ Q @ x)

    def mode(self, Q, x0=None, tol=1e-8, max_iter=100):
        """Newton ascent with step halving; returns (x, f, H, iterations)."""
        x = (self.x if x0 is None else x0).copy()
        f = self.log_posterior(x, Q)
        if not math.isfinite(f):
            x = np.zeros(self.n)
            f = self.log_posterior(x, Q)
            if not math.isfinite(f):
                raise DataError("log-likelihood is not finite at the starting point")
        for it in range(1, max_iter + 1):
            g, H, _, _ = self.gradient_hessian(x, Q)
            gnorm = float(np.linalg.norm(g))
            if gnorm <= tol:
                return x, f, H, it - 1
            cf = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
            step = scipy.linalg.cho_solve(cf, g, check_finite=False)
            t = 1.0
            for _ in range(40):
                xn = x + t * step
                fn = self.log_posterior(xn, Q)
                if math.isfinite(fn) and fn >= f - 1e-12 * abs(f):
                    break
                t *= 0.5
            else:
                break
            x, f_old, f = xn, f, fn
            # numerical floor: a full step that no longer moves anything
            if t == 1.0 and np.max(np.abs(step)) < 1e-11 and gnorm < 1e-5:
                g, H, _, _ = self.gradient_hessian(x, Q)
                return x, f, H, it
        raise FitError(f"Newton iterations did not converge (gradient norm {gnorm:.3g})")

    def laplace(self, rho, sigma2, tau, x0=None):
        """Laplace log p(y | theta) and the latent mode."""
        Q, logdetQ = self.prior_precision(rho, sigma2, tau)
        x, f, H, it = self.mode(Q, x0)
        Hs = H[np.ix_(self.integrated, self.integrated)] if self.p else H
        L = scipy.linalg.cholesky(Hs, lower=True, check_finite=False)
        logdetH = 2.0 * np.log(np.diag(L)).sum()
        return f + 0.5 * logdetQ - 0.5 * logdetH, x, it

    # -- hyperparameters ------------------------------------------------
    def log_hyperprior(self, u_rho, log_sigma2, log_tau, rho_free=True):
        pr = self.priors
        out = 0.0
        if rho_free:
            out += (pr.rho_a * math.log(expit(u_rho)) + pr.rho_b * math.log(expit(-u_rho))
                    - betaln(pr.rho_a, pr.rho_b))
        prec = math.exp(-log_sigma2)
        out += (pr.prec_shape * math.log(pr.prec_rate) - gammaln(pr.prec_shape)
                - pr.prec_shape * log_sigma2 - pr.prec_rate * prec)
        out += (pr.tau_shape * math.log(pr.tau_rate) - gammaln(pr.tau_shape)
                + pr.tau_shape * log_tau - pr.tau_rate * math.exp(log_tau))
        return out


def _model_rho(model: str) -> float | None:
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    return {"car": None, "iid": 0.0, "icar": ICAR_RHO}[model]


class _HyperObjective:
    """Negative log marginal posterior of the free hyperparameters."""

    def __init__(self, problem: LatentProblem, fixed_rho: float | None):
        self.problem = problem
        self.fixed_rho = fixed_rho
        self.n_evals = 0
        self.newton_iters = 0
        self.best = (math.inf, None, None, None)

    def unpack(self, v):
        if self.fixed_rho is None:
            return expit(v[0]), math.exp(v[1]), math.exp(v[2])
        return self.fixed_rho, math.exp(v[0]), math.exp(v[1])

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        rho, s2, tau = self.unpack(v)
        self.n_evals += 1
        lm, x, it = self.problem.laplace(rho, s2, tau, self.problem.x)
        self.newton_iters += it
        self.problem.x = x
        if self.fixed_rho is None:
            lp = self.problem.log_hyperprior(v[0], v[1], v[2])
        else:
            lp = self.problem.log_hyperprior(0.0, v[0], v[1], rho_free=False)
        val = -(lm + lp)
        if val < self.best[0]:
            self.best = (val, v.copy(), x.copy(), lm)
        return val


def _hessian_fd(fun, v, h=0.1):
    m = len(v)
    H = np.empty((m, m))
    f0 = fun(v)
    for i in range(m):
        e = np.zeros(m)
        e[i] = h
        H[i, i] = (fun(v + e) - 2.0 * f0 + fun(v - e)) / h**2
        for j in range(i):
            e2 = np.zeros(m)
            e2[j] = h
            H[i, j] = H[j, i] = (fun(v + e + e2) - fun(v + e - e2)
                                 - fun(v - e + e2) + fun(v - e - e2)) / (4 * h * h)
    return H, f0


MIN_HYPER_CURVATURE = 1e-2
HYPER_INTEGRATION = ("grid", "gaussian")
# grid exploration of the hyper posterior, in standardised steps
GRID_SD_STEP = 1.5
GRID_MAX_STEP = 1.5
GRID_DROP = 5.0
GRID_MAX_POINTS = 5000
# integration domain in (logit rho, log sigma2, log tau); with vague Gamma hyperpriors and
# little information on tau the evidence depends on this box
GRID_BOX = ((-12.0, 12.0), (-12.0, 10.0), (-14.0, 16.0))


def _grid_log_evidence(obj, v_hat, fmin, H):
    """log of the integral of exp(-obj) over the free hyperparameters.

    Trapezoid rule on a lattice aligned with the eigenvectors of ``H``,
    GRID_SD_STEP standard deviations per step but never more than GRID_MAX_STEP on
    the transformed scale, grown outward from the mode until the log
    density falls GRID_DROP below its maximum.
    """
    m = len(v_hat)
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    sd = np.minimum(GRID_SD_STEP / np.sqrt(np.maximum(lam, 1e-300)), GRID_MAX_STEP)
    B = V * sd
    box = np.array(GRID_BOX[-m:]) if obj.fixed_rho is not None else np.array(GRID_BOX)
    vals = {(0,) * m: -fmin}
    best = -fmin
    frontier = [(0,) * m]
    while frontier:
        nxt = []
        for z in frontier:
            if vals[z] < best - GRID_DROP:
                continue
            for i in range(m):
                for s in (-1, 1):
                    y = list(z)
                    y[i] += s
                    y = tuple(y)
                    if y in vals:
                        continue
                    v = v_hat + B @ np.array(y, dtype=float)
                    if np.any(v < box[:, 0]) or np.any(v > box[:, 1]):
                        vals[y] = -math.inf
                        continue
                    try:
                        vals[y] = -obj(v)
                    except FitError:
                        vals[y] = -math.inf
                        continue
                    best = max(best, vals[y])
                    nxt.append(y)
        frontier = nxt
        if len(vals) > GRID_MAX_POINTS:
            log.warning("hyperparameter grid truncated at %d points", len(vals))
            break
    arr = np.array(list(vals.values()))
    return float(logsumexp(arr) + np.log(np.abs(np.linalg.det(B)))), len(vals)


def fit_model(dataset: SurvivalDataset, region: StudyRegion, grid: PiecewiseGrid,
              window_units=None, priors: PriorSpec = PriorSpec(), beta_fixed=None,
              model: str = "car", start=None, x0=None, window_id=None, records=None,
              R=None, hyper_integration: str = "grid") -> ModelFit:
    """Fit H0 (``window_units=None``) or H1(w) and return its Laplace summary.

    ``start`` is an optional (rho, sigma2, tau) starting point for the
    hyperparameter search; ``x0`` warm-starts the latent mode.
    ``hyper_integration`` chooses how the evidence integrates over the
    hyperparameters: ``grid`` (numerical, default) or ``gaussian`` (volume
    term from the Hessian at the mode).
    """
    if hyper_integration not in HYPER_INTEGRATION:
        raise ValueError(f"hyper_integration must be one of {HYPER_INTEGRATION}")
    fixed_rho = _model_rho(model)
    problem = LatentProblem(dataset, region, grid, priors, window_units, beta_fixed,
                            R=R, records=records)
    if x0 is not None:
        problem.x[:len(x0)] = x0[:problem.n]
    rho0, s20, tau0 = HYPER_START if start is None else start
    lo_rho, hi_rho = logit(RHO_BOUNDS[0]), logit(RHO_BOUNDS[1])
    if fixed_rho is None:
        v0 = np.array([logit(min(max(rho0, RHO_BOUNDS[0]), RHO_BOUNDS[1])),
                       math.log(s20), math.log(tau0)])
        bounds = [(lo_rho, hi_rho), LOG_SIGMA2_BOUNDS, LOG_TAU_BOUNDS]
    else:
        v0 = np.array([math.log(s20), math.log(tau0)])
        bounds = [LOG_SIGMA2_BOUNDS, LOG_TAU_BOUNDS]
    v0 = np.clip(v0, [b[0] for b in bounds], [b[1] for b in bounds])
    obj = _HyperObjective(problem, fixed_rho)
    step = 1.0 if start is None else 0.5
    simplex = np.vstack([v0] + [v0 + step * e for e in np.eye(len(v0))])
    simplex = np.clip(simplex, [b[0] for b in bounds], [b[1] for b in bounds])
    try:
        res = scipy.optimize.minimize(
            obj, v0, method="Nelder-Mead", bounds=bounds,
            options={"initial_simplex": simplex, "xatol": 1e-3, "fatol": 1e-5,
                     "maxfev": 600})
    except FitError as exc:
        raise FitError(str(exc), window=window_id) from None
    _, v_hat, x_hat, lm_hat = obj.best
    problem.x = x_hat
    try:
        Hh, fmin = _hessian_fd(obj, v_hat)
    except FitError as exc:
        raise FitError(str(exc), window=window_id) from None
    problem.x = x_hat
    if hyper_integration == "grid":
        log_marginal, _ = _grid_log_evidence(obj, v_hat, fmin, Hh)
    else:
        eig = np.linalg.eigvalsh(0.5 * (Hh + Hh.T))
        eig = np.maximum(eig, MIN_HYPER_CURVATURE)
        m = len(v_hat)
        log_marginal = -fmin + 0.5 * m * math.log(2 * math.pi) - 0.5 * np.log(eig).sum()
    rho, s2, tau = obj.unpack(v_hat)
    xs = x_hat
    alpha = float(xs[-1]) if window_units is not None else None
    beta = (xs[problem.sl_b].copy() if problem.p else
            (np.asarray(beta_fixed, dtype=float) if beta_fixed is not None else np.zeros(0)))
    mode = LatentField(xs[problem.sl_c].copy(), xs[problem.sl_x].copy(), alpha)
    label = "H0" if window_units is None else f"H1({window_id if window_id is not None else 'w'})"
    log.debug("%s: rho=%.3f sigma2=%.3g tau=%.3g logml=%.3f evals=%d", label, rho, s2,
              tau, log_marginal, obj.n_evals)
    return ModelFit(label, window_id, mode, {"rho": float(rho), "sigma2": float(s2),
                                             "tau": float(tau)},
                    beta, float(log_marginal), float(lm_hat), obj.newton_iters, obj.n_evals)


def bayes_factor(fit_alt: ModelFit, fit_null: ModelFit) -> float:
    """log BF of the alternative against the null."""
    return fit_alt.log_marginal - fit_null.log_marginal


def score_log_bf(dataset: SurvivalDataset, region: StudyRegion, grid: PiecewiseGrid,
                 windows: WindowSet, null_fit: ModelFit, priors: PriorSpec = PriorSpec(),
                 beta_fixed=None, records=None, R=None) -> np.ndarray:
    """Quadratic approximation of every window's log BF at the null fit.

    Expands the H1(w) log posterior around (null mode, alpha_w = 0) with
    the hyperparameters held at the null estimates, and integrates the
    resulting Gaussian exactly. Used to rank windows before the full fits.
    """
    from frailscan import kernels

    problem = LatentProblem(dataset, region, grid, priors, None, beta_fixed, R=R,
                            records=records)
    if problem.p:
        raise ValueError("score screening needs beta fixed")
    hm = null_fit.hyper_map
    Q, _ = problem.prior_precision(hm["rho"], hm["sigma2"], hm["tau"])
    x = np.r_[null_fit.posterior_mode.c, null_fit.posterior_mode.X]
    x, _, H, _ = problem.mode(Q, x)
    mu = problem.E * np.exp(problem.eta(x))
    cm = problem._cells(mu)
    resid = problem._cells(problem.d - mu).sum(axis=0)
    mx = cm.sum(axis=0)
    order, cent, sizes = windows.order, windows.centers, windows.sizes
    g = kernels.prefix_sums(resid, order, cent, sizes)
    h_aa = kernels.prefix_sums(mx, order, cent, sizes) + 1.0 / priors.alpha_var
    L = scipy.linalg.cholesky(H, lower=True, check_finite=False)
    out = np.empty(len(windows))
    chunk = 2048
    for s in range(0, len(windows), chunk):
        U = windows.subset(np.arange(s, min(s + chunk, len(windows)))).indicator()
        B = np.vstack([cm @ U.T, mx[:, None] * U.T])
        Y = scipy.linalg.solve_triangular(L, B, lower=True, check_finite=False)
        schur = h_aa[s:s + chunk] - np.einsum("ij,ij->j", Y, Y)
        schur = np.maximum(schur, 1e-12)
        gs = g[s:s + chunk]
        out[s:s + chunk] = -0.5 * np.log(priors.alpha_var * schur) + 0.5 * gs * gs / schur
    return out


def select_frailties(dataset: SurvivalDataset, region: StudyRegion, grid: PiecewiseGrid,
                     windows: WindowSet, priors: PriorSpec = PriorSpec(),
                     bf_threshold: float = 30.0, model: str = "car",
                     strategy: str = "screened", n_refine: int = 5,
                     null_fit: ModelFit | None = None,
                     hyper_integration: str = "grid") -> FrailtySelection:
    """Fit H0 and the window alternatives, then apply the Bayes-factor rule.

    ``strategy="exhaustive"`` fits every window in full. ``"screened"``
    ranks windows by :func:`score_log_bf` and fits the ``n_refine`` best in
    full, continuing down the ranking while an unfitted window still holds
    the largest ledger value. ``hyper_integration`` is passed to every
    :func:`fit_model` call.
    """
    if len(windows) == 0:
        raise ValueError("no candidate windows")
    if strategy not in ("screened", "exhaustive"):
        raise ValueError(f"unknown strategy {strategy!r}")
    R = build_neighbor_matrix(region)
    if null_fit is None:
        null_fit = fit_model(dataset, region, grid, None, priors, model=model, R=R,
                             hyper_integration=hyper_integration)
    beta = null_fit.beta_hat if dataset.p else None
    records = expand_piecewise(dataset, grid)
    if dataset.p:
        # refit with beta frozen so H0 and every H1 treat beta identically
        null_fit = fit_model(dataset, region, grid, None, priors, beta_fixed=beta,
                             model=model, R=R, records=records,
                             start=_start(null_fit), hyper_integration=hyper_integration,
                             x0=np.r_[null_fit.posterior_mode.c, null_fit.posterior_mode.X])
    x_null = np.r_[null_fit.posterior_mode.c, null_fit.posterior_mode.X, 0.0]

    def refine(i):
        fit = fit_model(dataset, region, grid, windows.members(i), priors, beta_fixed=beta,
                        model=model, start=_start(null_fit), x0=x_null, window_id=int(i),
                        records=records, R=R, hyper_integration=hyper_integration)
        return fit

    refined = {}
    if strategy == "exhaustive":
        for i in range(len(windows)):
            refined[i] = refine(i)
        ledger = {i: bayes_factor(f, null_fit) for i, f in refined.items()}
    else:
        approx = score_log_bf(dataset, region, grid, windows, null_fit, priors, beta, records, R)
        ledger = {i: float(v) for i, v in enumerate(approx)}
        ranking = list(np.argsort(-approx, kind="stable"))
        for i in ranking[:n_refine]:
            refined[int(i)] = refine(int(i))
            ledger[int(i)] = bayes_factor(refined[int(i)], null_fit)
        pos = n_refine
        while pos < len(ranking):
            top = max(ledger, key=lambda j: (ledger[j], -j))
            if top in refined:
                break
            i = int(ranking[pos])
            pos += 1
            if i not in refined:
                refined[i] = refine(i)
                ledger[i] = bayes_factor(refined[i], null_fit)
    w_star = max(ledger, key=lambda j: (ledger[j], -j))
    if ledger[w_star] >= math.log(bf_threshold):
        fit = refined[w_star]
        members = windows.members(w_star)
        phi = fit.posterior_mode.X.copy()
        phi[members] += fit.posterior_mode.alpha_w
        return FrailtySelection(phi, fit.rho, fit.hypothesis, int(w_star), ledger,
                                fit.posterior_mode.alpha_w, null_fit, fit, refined,
                                bf_threshold)
    return FrailtySelection(null_fit.posterior_mode.X.copy(), null_fit.rho, "H0", None,
                            ledger, None, null_fit, null_fit, refined, bf_threshold)


def _start(fit: ModelFit):
    hm = fit.hyper_map
    return (hm["rho"], hm["sigma2"], hm["tau"])
