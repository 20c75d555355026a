"""Monte Carlo significance of the Gaussian scan by simulating the null GMRF."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from frailscan.scan import DegenerateFieldError, GaussianScanInput, ScanResult


def replicate_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    """Independent stream for one replicate; identical across serial and parallel runs."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index), int(attempt)))
    return np.random.Generator(np.random.PCG64(ss))


def pvalue(stat: float, null_stats) -> float:
    null_stats = np.asarray(null_stats)
    return (1.0 + np.count_nonzero(null_stats >= stat)) / (len(null_stats) + 1.0)


@dataclass(frozen=True, eq=False)
class NullGenerator:
    """Draws N(alpha_hat 1, sigma2_0_hat A^-1) fields."""

    alpha_hat: float
    sigma2_0_hat: float
    A: np.ndarray
    seed: int = 0
    M: int = 999

    def __post_init__(self):
        L = np.asfortranarray(scipy.linalg.cholesky(np.asarray(self.A, dtype=float), lower=True))
        object.__setattr__(self, "_L", L)

    @property
    def chol(self) -> np.ndarray:
        return self._L


def sample_gmrf(generator: NullGenerator, replicate_index: int, attempt: int = 0) -> np.ndarray:
    """alpha 1 + sqrt(s2) L^-T z with A = L L^T, so the covariance is s2 A^-1."""
    rng = replicate_rng(generator.seed, replicate_index, attempt)
    z = rng.standard_normal(generator.chol.shape[0])
    # LAPACK directly: the scipy wrapper's checks dominate at small K
    x, info = scipy.linalg.lapack.dtrtrs(generator.chol, z, lower=1, trans=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"triangular solve failed (info={info})")
    return generator.alpha_hat + np.sqrt(generator.sigma2_0_hat) * x


@dataclass
class SignificanceReport:
    lambda_obs: float
    null_lambdas: np.ndarray
    p_values: list

    @property
    def p_mlc(self) -> float:
        return self.p_values[0]


def null_lambda(inp: GaussianScanInput, generator: NullGenerator, index: int) -> float:
    for attempt in (0, 1):
        phi = sample_gmrf(generator, index, attempt)
        try:
            return inp.lambda_of(phi)
        except DegenerateFieldError:
            continue
    raise DegenerateFieldError(f"replicate {index} produced a degenerate field twice")


def _null_chunk(args):
    inp, gen, indices = args
    return [null_lambda(inp, gen, i) for i in indices]


def monte_carlo_pvalue(inp: GaussianScanInput, result: ScanResult, M: int = 999,
                       seed: int = 0, threads: int = 1) -> SignificanceReport:
    """p-values of the MLC and secondaries against simulated null maxima."""
    if M < 1:
        raise ValueError("M must be at least 1")
    alpha0, s2_0 = result.null_params
    gen = NullGenerator(alpha0, s2_0, inp.A, seed, M)
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        chunks = np.array_split(np.arange(M), threads)
        with ProcessPoolExecutor(threads) as ex:
            parts = ex.map(_null_chunk, [(inp, gen, c.tolist()) for c in chunks])
            null = np.array([x for part in parts for x in part])
    else:
        null = np.array([null_lambda(inp, gen, i) for i in range(M)])
    pv = [pvalue(s.llr, null) for s in result.clusters]
    return SignificanceReport(result.lam, null, pv)
