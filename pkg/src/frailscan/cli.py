"""Command-line interface: ``frailscan scan|baseline|simulate``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure. Failures
print one ``E_<KIND> <source>: <detail>`` line on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from frailscan import baselines, frailty, report, simulation
from frailscan.inference import monte_carlo_pvalue
from frailscan.scan import DegenerateFieldError, GaussianScanInput, scan_all
from frailscan.spatial import (ValidationError, build_neighbor_matrix, enumerate_windows,
                               leroux_matrix, read_region)
from frailscan.survdata import build_grid, ingest_individuals

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (frailty.FitError, DegenerateFieldError, baselines.AdjustmentError,
                  np.linalg.LinAlgError, FloatingPointError)


class CliError(Exception):
    def __init__(self, code, kind, source, detail):
        super().__init__(detail)
        self.code, self.kind, self.source, self.detail = code, kind, source, detail

    def line(self) -> str:
        return f"E_{self.kind} {self.source}: {self.detail}"


def _input_error(source, detail):
    return CliError(EXIT_INPUT, "INPUT", source, detail)


def _load_inputs(args):
    paths = {"units": args.units, "adjacency": args.adjacency, "individuals": args.individuals}
    for name, p in paths.items():
        if not Path(p).is_file():
            raise _input_error(name, f"file not found: {p}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            region = read_region(args.units, args.adjacency)
        dataset = ingest_individuals(args.individuals, region)
    except ValidationError as exc:
        raise _input_error(exc.source or "input", str(exc)) from None
    windows = enumerate_windows(region, dataset.unit_counts())
    if len(windows) == 0:
        raise _input_error("individuals", "no candidate window holds at most half the individuals")
    return paths, region, dataset, windows


def _hazard_ratio(dataset, members):
    try:
        hr, lo, hi = baselines.cluster_hazard_ratio(dataset, members)
    except (baselines.AdjustmentError, np.linalg.LinAlgError):
        return None
    return {"estimate": hr, "ci95": [lo, hi]}


def _quantiles(null):
    return {str(q): float(np.quantile(null, q)) for q in (0.5, 0.9, 0.95, 0.99)}


def run_scan(args, out: Path) -> dict:
    paths, region, dataset, windows = _load_inputs(args)
    M = 999 if args.paper_scale else args.mc_replicates
    strategy = "exhaustive" if args.paper_scale else args.strategy
    grid = build_grid(dataset)
    sel = frailty.select_frailties(dataset, region, grid, windows, bf_threshold=args.bf_threshold,
                                   model=args.model, strategy=strategy)
    A = leroux_matrix(build_neighbor_matrix(region), sel.rho_star)
    inp = GaussianScanInput(sel.phi_star, A, windows)
    res = scan_all(inp, args.secondary_rule, args.max_secondary)
    sig = monte_carlo_pvalue(inp, res, M=M, seed=args.seed, threads=args.threads)
    clusters = []
    for score, p in zip(res.clusters, sig.p_values):
        c = report.cluster_summary(windows, score.window, dataset)
        c.update(llr=score.llr, p_value=p, alpha_w_hat=score.alpha_w_hat,
                 alpha_wc_hat=score.alpha_wc_hat, sigma2_w_hat=score.sigma2_w_hat,
                 direction=score.direction, degenerate=score.degenerate,
                 hazard_ratio=_hazard_ratio(dataset, windows.members(score.window)))
        clusters.append(c)
    win = sel.winner_window
    result = {
        "method": "frailty", "model": args.model,
        "data": {"n_units": region.n_units, "n_individuals": dataset.n,
                 "n_events": dataset.n_events, "covariates": list(dataset.covariate_names),
                 "n_windows": len(windows), "n_intervals": grid.n_intervals},
        "selection": {"winner": sel.winner, "rho_star": sel.rho_star,
                      "alpha_hat_wstar": sel.alpha_hat_wstar,
                      "winner_units": None if win is None else list(windows.member_ids(win)),
                      "max_log_bf": max(sel.bf_ledger.values()),
                      "bf_threshold": args.bf_threshold, "strategy": strategy,
                      "beta_hat": dict(zip(dataset.covariate_names,
                                           sel.null_fit.beta_hat.tolist())),
                      "phi_star": dict(zip(region.unit_ids, sel.phi_star.tolist()))},
        "scan": {"lambda": res.lam, "null_alpha": res.null_params[0],
                 "null_sigma2": res.null_params[1], "secondary_rule": args.secondary_rule,
                 "clusters": clusters},
        "monte_carlo": {"replicates": M, "seed": args.seed,
                        "null_lambda_quantiles": _quantiles(sig.null_lambdas)},
    }
    report.write_json(out / "result.json", result)
    report.write_json(out / "clusters.geojson", report.clusters_geojson(region, clusters))
    if args.diagnostics:
        report.write_json(out / "diagnostics.json", sel.diagnostics(windows))
    return paths


def run_baseline(args, out: Path) -> dict:
    if args.method not in baselines.METHODS:
        raise _input_error("method", f"unknown method {args.method!r}")
    paths, region, dataset, windows = _load_inputs(args)
    M = 999 if args.paper_scale else args.mc_replicates
    adj = None
    if dataset.p and not args.no_adjust:
        adj = baselines.adjust_covariates(dataset, args.method)
    scan = baselines.exponential_scan if args.method == "exponential" else baselines.logrank_scan
    try:
        res = scan(dataset, windows, M=M, seed=args.seed, adjustment=adj,
                   max_secondary=args.max_secondary)
    except baselines.MethodError as exc:
        raise _input_error("individuals", str(exc)) from None
    clusters = []
    for i, stat, p in res.clusters:
        c = report.cluster_summary(windows, i, dataset)
        c.update(statistic=stat, p_value=p,
                 hazard_ratio=_hazard_ratio(dataset, windows.members(i)))
        clusters.append(c)
    result = {
        "method": args.method,
        "data": {"n_units": region.n_units, "n_individuals": dataset.n,
                 "n_events": dataset.n_events, "covariates": list(dataset.covariate_names),
                 "n_windows": len(windows)},
        "adjustment": None if adj is None else {
            "beta_hat": dict(zip(dataset.covariate_names, adj.beta.tolist())),
            "se": dict(zip(dataset.covariate_names, adj.se.tolist()))},
        "statistic": res.statistic, "clusters": clusters,
        "permutations": {"replicates": M, "seed": args.seed,
                         "null_max_quantiles": _quantiles(res.null_stats)},
    }
    report.write_json(out / "result.json", result)
    report.write_json(out / "clusters.geojson", report.clusters_geojson(region, clusters))
    return paths


def run_simulate(args, out: Path) -> dict:
    overrides = {k: v for k, v in (("replicates", args.replicates),
                                    ("mc_replicates", args.mc_replicates),
                                    ("seed", args.seed),
                                    ("bf_threshold", args.bf_threshold)) if v is not None}
    if args.model is not None:
        overrides["methods"] = [args.model]
    if args.method is not None:
        overrides["methods"] = [args.method]
    inputs = {}
    try:
        if args.config is not None:
            if not Path(args.config).is_file():
                raise _input_error("config", f"file not found: {args.config}")
            cfg = simulation.load_config(args.config).to_dict()
            cfg.update(overrides)
            if args.paper_scale:
                cfg.update(replicates=100, mc_replicates=999)
            config = simulation.SimulationConfig(**cfg)
            inputs["config"] = args.config
        elif args.study is not None:
            config = simulation.preset(args.study, args.paper_scale, **overrides)
        else:
            raise _input_error("config", "give a config file or --study")
    except (ValidationError, TypeError, ValueError) as exc:
        if isinstance(exc, CliError):
            raise
        raise _input_error("config", str(exc)) from None

    def progress(i, n):
        logging.getLogger("frailscan").info("replicate %d/%d", i, n)

    rep = simulation.run_experiment(config, threads=args.threads, progress=progress)
    rep.write(out)
    args._resolved = config.to_dict()
    return inputs


COMMANDS = {"scan": run_scan, "baseline": run_baseline, "simulate": run_simulate}


def _shared(p, simulate=False):
    d = None if simulate else 0
    p.add_argument("--seed", type=int, default=d, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--mc-replicates", type=int, default=None if simulate else 999,
                   help="Monte Carlo or permutation replicates")
    p.add_argument("--bf-threshold", type=float, default=None if simulate else 30.0,
                   help="Bayes factor needed to keep the cluster alternative")
    p.add_argument("--model", choices=frailty.MODELS, default=None if simulate else "car",
                   help="frailty correlation structure")
    p.add_argument("--paper-scale", action="store_true",
                   help="999 replicates (scan also fits every window in full)")
    p.add_argument("--diagnostics", action="store_true",
                   help="write per-window Bayes factors and fit details")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _inputs(p):
    p.add_argument("--units", required=True, help="CSV unit_id,x,y")
    p.add_argument("--adjacency", required=True, help="edge list CSV unit_id_a,unit_id_b")
    p.add_argument("--individuals", required=True, help="CSV unit_id,time,event[,z...]")
    p.add_argument("--max-secondary", type=int, default=10, help="secondary clusters to report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frailscan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="two-stage frailty scan")
    _inputs(p)
    _shared(p)
    p.add_argument("--secondary-rule", choices=("disjoint", "center"), default="disjoint")
    p.add_argument("--strategy", choices=("screened", "exhaustive"), default="screened",
                   help="which alternatives get a full fit")

    p = sub.add_parser("baseline", help="exponential or log-rank scan")
    _inputs(p)
    _shared(p)
    p.add_argument("--method", required=True, help="exponential or logrank")
    p.add_argument("--no-adjust", action="store_true", help="ignore covariate columns")

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("config", nargs="?", help="TOML or JSON SimulationConfig")
    p.add_argument("--study", help=f"preset: {', '.join(sorted(simulation.PRESETS))}")
    p.add_argument("--method", choices=simulation.METHODS, default=None)
    p.add_argument("--replicates", type=int, default=None)
    _shared(p, simulate=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](args, out)
    except CliError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.code
    except NUMERIC_ERRORS as exc:
        print(f"E_NUMERIC {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_NUMERIC
    config = getattr(args, "_resolved", None) or {
        k: v for k, v in sorted(vars(args).items()) if not k.startswith("_")}
    seed = config.get("seed", args.seed)
    report.write_json(out / "manifest.json",
                      report.manifest(args.command, config, seed, inputs,
                                      time.perf_counter() - t0))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
