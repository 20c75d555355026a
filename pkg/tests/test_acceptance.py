"""Acceptance criteria, one test each, at the stated tolerances.

Each test prints (and records for the terminal summary) one PASS/FAIL line.
The simulation studies (criteria 6 to 9) are long on a single core, so their
reports are cached under ``acceptance_runs/`` (or ``$FRAILSCAN_ACCEPTANCE_DIR``)
keyed by the study config and a digest of the package source; any code
change forces a recompute. ``FRAILSCAN_ACCEPTANCE_REFRESH=1`` ignores the cache.
"""
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

import frailscan
from conftest import ACCEPTANCE_LINES, path_region, random_region
from frailscan import frailty, report, simulation
from frailscan.inference import NullGenerator, monte_carlo_pvalue, pvalue, sample_gmrf
from frailscan.scan import GaussianScanInput, gls_alt_estimates, gls_null_estimates, scan_all
from frailscan.spatial import (build_neighbor_matrix, car_conditional_moments, enumerate_windows,
                               leroux_matrix)
from oracles import toys
from oracles.gaussian_mle import alt_mle, null_mle

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("FRAILSCAN_ACCEPTANCE_DIR", ROOT / "acceptance_runs"))
REFRESH = os.environ.get("FRAILSCAN_ACCEPTANCE_REFRESH") == "1"


def _verdict(n, title, ok, detail):
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _source_digest():
    h = hashlib.sha256()
    pkg = Path(frailscan.__file__).parent
    for p in sorted(pkg.glob("*.py")) + sorted(pkg.glob("*.pyx")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _experiment(name, config):
    """Run (or load the cached run of) a simulation study."""
    key = hashlib.sha256((report.dumps(config.to_dict()) + _source_digest()).encode())
    out = CACHE / f"{name}-{key.hexdigest()[:16]}"
    metrics = out / "metrics.json"
    if metrics.exists() and not REFRESH:
        return simulation.MetricsReport.read(metrics), json.loads((out / "time.json").read_text())
    t0 = time.perf_counter()
    rep = simulation.run_experiment(config)
    elapsed = time.perf_counter() - t0
    rep.write(out)
    (out / "time.json").write_text(json.dumps({"seconds": elapsed}))
    return rep, {"seconds": elapsed}


def _rate_band(n, p=0.05, level=0.95):
    lo, hi = stats.binom.interval(level, n, p)
    return lo / n, hi / n


# -- fast criteria ---------------------------------------------------------

def _estimator_instances(n=50, seed=2024):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(4, 26))
        A = leroux_matrix(build_neighbor_matrix(random_region(rng, k)), rng.uniform(0, 0.9))
        phi = rng.standard_normal(k) * rng.uniform(0.2, 3) + rng.normal(0, 2)
        members = rng.permutation(k)[:int(rng.integers(1, k))]
        out.append((phi, A, members))
    return out


def test_criterion_01_closed_form_estimators():
    inst = _estimator_instances()
    t0 = time.perf_counter()
    mine = [(gls_null_estimates(phi, A), gls_alt_estimates(phi, A, w)) for phi, A, w in inst]
    runtime = time.perf_counter() - t0
    err = 0.0
    for (phi, A, w), (n0, a1) in zip(inst, mine):
        err = max(err, np.max(np.abs(np.subtract(n0, null_mle(phi, A)))),
                  np.max(np.abs(np.subtract(a1, alt_mle(phi, A, w)))))
    _verdict(1, "GLS estimators vs numeric MLE", err <= 1e-8 and runtime < 10,
             f"max abs error {err:.2e} (<= 1e-8), package runtime {runtime:.3f} s (< 10 s)")


def test_criterion_02_llr_nonnegative_and_invariant():
    rng = np.random.default_rng(7)
    worst_neg, worst_shift = 0.0, 0.0
    n_triples = 0
    while n_triples < 1000:
        k = int(rng.integers(4, 16))
        region = random_region(rng, k)
        A = leroux_matrix(build_neighbor_matrix(region), rng.uniform(0, 0.95))
        windows = enumerate_windows(region, rng.integers(1, 20, k))
        phi = rng.standard_normal(k)
        llr = scan_all(GaussianScanInput(phi, A, windows), max_secondary=0).llr
        n_triples += len(llr)
        worst_neg = min(worst_neg, float(llr.min()))
        a, b = rng.normal(0, 5), rng.uniform(0.01, 100) * rng.choice([-1, 1])
        llr2 = scan_all(GaussianScanInput(a + b * phi, A, windows), max_secondary=0).llr
        worst_shift = max(worst_shift, float(np.max(np.abs(llr2 - llr))))
    ok = worst_neg >= -1e-12 and worst_shift <= 1e-10
    _verdict(2, "LLR nonnegativity and affine invariance", ok,
             f"{n_triples} triples, min LLR {worst_neg:.1e} (>= -1e-12), "
             f"max change {worst_shift:.1e} (<= 1e-10)")


def test_criterion_03_car_conditionals():
    rng = np.random.default_rng(3)
    err = 0.0
    for _ in range(20):
        k = int(rng.integers(3, 10))
        R = build_neighbor_matrix(random_region(rng, k))
        adj = np.diag(np.diag(R)) - R
        rho, s2 = rng.uniform(0, 0.99), rng.uniform(0.1, 3)
        S = s2 * np.linalg.inv(leroux_matrix(R, rho))
        x = rng.standard_normal(k)
        for i in range(k):
            o = np.delete(np.arange(k), i)
            gain = np.linalg.solve(S[np.ix_(o, o)], S[o, i])
            m_joint = gain @ x[o]
            v_joint = S[i, i] - S[i, o] @ gain
            m, v = car_conditional_moments(adj, rho, s2, x, i)
            err = max(err, abs(m - m_joint), abs(v - v_joint))
    _verdict(3, "CAR conditionals vs joint Gaussian", err <= 1e-10,
             f"20 graphs, max abs error {err:.1e} (<= 1e-10)")


def test_criterion_04_gmrf_sampler():
    A = leroux_matrix(build_neighbor_matrix(path_region(5)), 0.8)
    gen = NullGenerator(0.0, 1.0, A, seed=11)
    t0 = time.perf_counter()
    x = np.array([sample_gmrf(gen, i) for i in range(100_000)])
    runtime = time.perf_counter() - t0
    S = np.linalg.inv(A)
    err = np.linalg.norm(np.cov(x, rowvar=False) - S) / np.linalg.norm(S)
    _verdict(4, "GMRF sampler covariance", err < 0.1 and runtime < 5,
             f"Frobenius rel. error {err:.4f} (< 0.1), {runtime:.2f} s for 1e5 draws (< 5 s)")


def test_criterion_05_laplace_vs_quadrature():
    frozen = toys.load_frozen()
    assert sorted(frozen) == list(toys.SEEDS)
    gaps, agree = [], 0
    for seed in toys.SEEDS:
        ds, grid = toys.toy(seed)
        lap = {h: frailty.fit_model(ds, toys.REGION, grid, w or None).log_marginal
               for h, w in toys.WINDOWS.items()}
        q = frozen[seed]
        gaps += [abs(lap[h] - q[h]) for h in toys.WINDOWS]
        agree += np.sign(lap["H1"] - lap["H0"]) == np.sign(q["H1"] - q["H0"])
    ok = max(gaps) <= 0.3 and agree == len(toys.SEEDS)
    _verdict(5, "Laplace evidence vs quadrature", ok,
             f"max gap {max(gaps):.3f} nats (<= 0.3), BF sign agrees {agree}/{len(toys.SEEDS)}")


def test_criterion_10_pvalue_exactness_and_reproducibility(tmp_path):
    null = np.arange(1.0, 200.0)
    boundaries = pvalue(1e9, null) == 1 / 200 and pvalue(-1.0, null) == 1.0
    rng = np.random.default_rng(10)
    region = random_region(rng, 12)
    A = leroux_matrix(build_neighbor_matrix(region), 0.5)
    windows = enumerate_windows(region, rng.integers(1, 10, 12))
    inp = GaussianScanInput(rng.standard_normal(12), A, windows)
    res = scan_all(inp)
    sig = monte_carlo_pvalue(inp, res, M=99, seed=1)
    p_ok = all(round(p * 100) == p * 100 and 0.01 <= p <= 1 for p in sig.p_values)
    cfg = simulation.preset("figure1", replicates=3, mc_replicates=19, sigma2=[0.101])
    outs = []
    for name in ("a", "b"):
        simulation.run_experiment(cfg).write(tmp_path / name)
        outs.append((tmp_path / name / "metrics.json").read_bytes())
    same = outs[0] == outs[1]
    _verdict(10, "p-value exactness and reproducibility", boundaries and p_ok and same,
             f"boundaries 1/(M+1) and 1 exact: {boundaries}, p in (1/100)Z: {p_ok}, "
             f"byte-identical reports: {same}")


# -- simulation studies ----------------------------------------------------

@pytest.fixture(scope="module")
def figure3():
    return _experiment("figure3", simulation.preset("figure3"))


def test_criterion_06_baseline_type_one_error_trend():
    rep, t = _experiment("figure1", simulation.preset("figure1"))
    parts, ok = [], True
    for m in ("exponential", "logrank"):
        cells = sorted((c for c in rep.cells if c.method == m), key=lambda c: c.sigma2)
        rates = [c.rejection_rate for c in cells]
        trend = stats.spearmanr([c.sigma2 for c in cells], rates)[0]
        ok &= bool(trend > 0) and rates[-1] > 0.15
        parts.append(f"{m} rates {rates} spearman {trend:.2f}")
    _verdict(6, "baseline type I error grows with sigma2", ok,
             "; ".join(parts) + f" (need spearman > 0, rate(0.101) > 0.15); {t['seconds']:.0f} s")


def test_criterion_07_car_size_and_power(figure3):
    rep, t = figure3
    parts, ok = [], True
    for c in sorted(rep.cells, key=lambda c: (c.alpha, c.rho)):
        n = c.replicates - c.failures
        if c.alpha == 0:
            lo, hi = _rate_band(n)
            good = lo <= c.rejection_rate <= hi
            parts.append(f"size(rho={c.rho}) {c.rejection_rate:.2f} in [{lo:.2f},{hi:.2f}]")
        else:
            good = c.rejection_rate >= 0.9 and c.fpr <= 0.05
            parts.append(f"power(rho={c.rho}) {c.rejection_rate:.2f}>=0.9 fpr {c.fpr:.3f}<=0.05")
        ok &= good and c.failures == 0
    _verdict(7, "CAR frailty scan size and power", ok,
             ", ".join(parts) + f"; {t['seconds']:.0f} s")


def test_criterion_08_iid_variant_oversized(figure3):
    car = figure3[0].cell(method="car", alpha=0.0, rho=0.8)
    cfg = simulation.preset("figure3", alpha=[0.0], rho=[0.8], methods=["iid"])
    rep, t = _experiment("iid", cfg)
    iid = rep.cell(method="iid")
    x = np.array([iid.rejections, car.rejections])
    n = np.array([iid.replicates - iid.failures, car.replicates - car.failures])
    pooled = x.sum() / n.sum()
    se = np.sqrt(pooled * (1 - pooled) * (1 / n[0] + 1 / n[1]))
    z = (x[0] / n[0] - x[1] / n[1]) / se if se > 0 else 0.0
    p = stats.norm.sf(z)
    _verdict(8, "iid variant exceeds CAR type I error at rho=0.8", p < 0.05,
             f"iid {x[0]}/{n[0]} vs car {x[1]}/{n[1]}, one-sided two-proportion p {p:.4f} "
             f"(< 0.05); {t['seconds']:.0f} s")


def test_criterion_09_ppv_falls_with_censoring():
    cfg = simulation.preset("censoring", censoring=[0.1, 0.4])
    rep, t = _experiment("censoring", cfg)
    lo, hi = rep.cell(censoring=0.1), rep.cell(censoring=0.4)
    design = cfg.design()

    def ppv(o):
        return simulation.cluster_metrics(o.detected, design.cluster, design.counts)[2]

    pairs = [(ppv(a), ppv(b)) for a, b in zip(lo.outcomes, hi.outcomes)
             if a.rejected and b.rejected]
    diff = float(np.mean([b - a for a, b in pairs])) if pairs else float("nan")
    _verdict(9, "PPV lower at 40% than at 10% censoring", diff < 0,
             f"PPV {lo.ppv:.3f} -> {hi.ppv:.3f}, paired mean difference {diff:+.4f} over "
             f"{len(pairs)} replicates rejecting in both (< 0); {t['seconds']:.0f} s")
