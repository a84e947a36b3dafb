"""Command line front end: ``tilted-boot verify|experiment|fit``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rngmod
from .bootstrap import (EMEstimator, ExperimentConfig, ExperimentReport, MeanEstimator, Method, RepResult, _RepRunner,
                        aggregate, build_kernels, calibrate_region, is_bootstrap, mean_setup_from_spec,
                        region_polygon, run_repetition, tilt_points)
from .chain_calculus import (chain_moments, eigen_derivative_check, empirical_covariance_oracle, lambda_hessian,
                             lan_diagnostic, poisson_residual, solve_poisson, spec_covariance)
from .config import ConfigError, RunConfig, load_config
from .emissions import DomainError
from .inference import FitError, ParameterVector, em_fit, layout_for
from .model import simulate_batch
from .tilting import build_tilted_kernel, log_weights_batch

log = logging.getLogger("tilted_boot")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_RUNTIME = 0, 2, 3, 4


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    return x


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def sha256_files(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is not None:
            h.update(Path(p).read_bytes())
    return h.hexdigest()


# --- verify -------------------------------------------------------------------------


def run_verify(cfg: RunConfig, seed: int) -> dict:
    """Cross-checks of the chain calculus and the change of measure; returns named checks."""
    spec = cfg.spec
    v = cfg.verify
    checks = {}
    mom = chain_moments(spec)
    sol = solve_poisson(spec.P, mom.gamma, pi=mom.pi)
    delta = sol.delta.copy()
    if v.corrupt_delta is not None:
        i, k, amount = v.corrupt_delta
        delta[int(i), int(k)] += float(amount)
    res = poisson_residual(spec.P, mom.gamma, delta)
    checks["poisson_residual"] = {"value": res, "tol": 1e-10, "passed": res <= 1e-10}

    sigma = spec_covariance(spec).sigma
    hess = lambda_hessian(spec)
    herr = float(np.max(np.abs(hess - sigma)))
    checks["hessian_vs_formula"] = {"value": herr, "tol": 1e-3, "passed": herr <= 1e-3}
    emp = empirical_covariance_oracle(spec, v.empirical_n, v.empirical_reps, rngmod.stream(seed, 900))
    rel = float(np.max(np.abs(emp.sigma - sigma)) / np.max(np.abs(sigma)))
    # the relative tolerance is below Monte Carlo error at small rep counts, so 3 SE also passes
    z = float(np.max(np.abs(emp.sigma - sigma) / np.maximum(emp.stderr, 1e-300)))
    checks["empirical_vs_formula"] = {"value": rel, "tol": 0.05, "max_z": z, "passed": rel <= 0.05 or z <= 3.0,
                                      "empirical": emp.sigma, "formula": sigma}

    eig = eigen_derivative_check(spec)
    checks["eigenfunction_derivative"] = {"value": eig.max_difference_error, "tol": 1e-4, "passed": eig.passed}

    eta = np.asarray(v.lan_eta if v.lan_eta is not None else np.eye(spec.dim)[0] * 0.5, dtype=float)
    lan = lan_diagnostic(spec, eta, v.lan_n, v.lan_reps, rngmod.stream(seed, 901), sigma=sigma)
    ok_mean = abs(lan.mean - lan.expected_mean) <= 3 * lan.mean_se
    ok_var = abs(lan.variance - lan.expected_variance) <= 0.1 * lan.expected_variance
    checks["lan"] = {"mean": lan.mean, "expected_mean": lan.expected_mean, "mean_se": lan.mean_se,
                     "variance": lan.variance, "expected_variance": lan.expected_variance,
                     "passed": bool(ok_mean and ok_var)}

    if spec.dim == 2:
        cls = class_c_check(spec, v.shape, v.nominal, v.lan_n, v.lan_reps, rngmod.stream(seed, 902))
        checks["class_c"] = cls
    return checks


def class_c_check(spec, shape, nominal, n, reps, rng) -> dict:
    """Under P, log dP/dQ* for the optimal tilt has mean σ_L²/2 and variance σ_L²."""
    setup = mean_setup_from_spec(spec, n)
    sol = tilt_points(shape, nominal)[0]
    kern = build_tilted_kernel(spec, sol.sigma_bar, setup.stud, setup.J, setup.delta, n, mu_hat=setup.mu_hat)
    L = np.empty(reps)
    for a in range(0, reps, 200):
        b = min(reps, a + 200)
        states, obs = simulate_batch(spec, n, b - a, rng)
        L[a:b] = log_weights_batch(kern, states, spec.features(obs).sum(axis=1))
    s2 = sol.sigma_l**2
    se = L.std(ddof=1) / np.sqrt(reps)
    ok = abs(L.mean() - s2 / 2) <= 3 * se and abs(L.var(ddof=1) - s2) <= 0.1 * s2
    return {"mean": L.mean(), "expected_mean": s2 / 2, "mean_se": se, "variance": L.var(ddof=1),
            "expected_variance": s2, "passed": bool(ok)}


def cmd_verify(cfg: RunConfig, args) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    checks = run_verify(cfg, seed)
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "verify.json", {"seed": seed, "checks": checks})
    failed = [k for k, c in checks.items() if not c["passed"]]
    for k, c in checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {k}")
    return EXIT_VERIFY if failed else EXIT_OK


# --- experiment -------------------------------------------------------------------------


def experiment_from_config(cfg: RunConfig, seed: int, repetitions: int | None = None) -> ExperimentConfig:
    e = cfg.experiment
    truth = cfg.spec
    em = cfg.em.build()
    if e.statistic == "mean":
        est = MeanEstimator(truth, em, vstar_steps=e.vstar_steps)
        theta_true = chain_moments(truth).mean if e.theta_true is None else np.asarray(e.theta_true, float)
    else:
        lay = layout_for(truth)
        try:
            target = tuple(lay.index(t) for t in e.target)
        except ValueError as exc:
            raise ConfigError(f"experiment.target names must be among {lay.names()}") from exc
        est = EMEstimator(truth, target, em, pilot_B0=e.pilot_B0, studentizer=e.studentizer)
        pv = ParameterVector.from_spec(truth)
        theta_true = pv.values[list(target)] if e.theta_true is None else np.asarray(e.theta_true, float)
    if len(theta_true) != 2:
        raise ConfigError("confidence regions are two-dimensional; the statistic must have two components")
    methods = tuple(Method(m["kind"], m["B"]) for m in e.methods)
    return ExperimentConfig(truth=truth, estimator=est, theta_true=np.asarray(theta_true, float), shape=e.shape,
                            nominal=e.nominal, m=e.m, n=e.n, methods=methods, kinds=tuple(e.kinds),
                            repetitions=e.repetitions if repetitions is None else repetitions, seed=seed,
                            tilt_target=e.tilt_target)


def run_experiment(exp: ExperimentConfig, threads: int = 1, checkpoint: Path | None = None,
                   resume: bool = False) -> tuple[ExperimentReport, list[RepResult]]:
    done: dict[int, RepResult] = {}
    if checkpoint is not None and resume and checkpoint.exists():
        for line in checkpoint.read_text().splitlines():
            try:
                r = RepResult.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError):
                continue  # torn write at interruption
            done[r.rep] = r
    todo = [r for r in range(exp.repetitions) if r not in done]
    fh = checkpoint.open("a" if resume else "w") if checkpoint is not None else None
    try:
        if threads > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                it = pool.map(_RepRunner(exp), todo, chunksize=max(1, len(todo) // (8 * threads)))
                for r in it:
                    done[r.rep] = r
                    if fh:
                        fh.write(json.dumps(r.to_json()) + "\n")
                        fh.flush()
        else:
            for rep in todo:
                r = run_repetition(exp, rep)
                done[rep] = r
                if fh:
                    fh.write(json.dumps(r.to_json()) + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    results = [done[r] for r in range(exp.repetitions)]
    return aggregate(exp, results), results


def write_report_csv(path: Path, report: ExperimentReport) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ExperimentReport.COLUMNS)
        for r in report.rows:
            w.writerow([fmt(getattr(r, c)) for c in ExperimentReport.COLUMNS])


def plot_data(exp: ExperimentConfig, levels=(0.5, 0.95, 0.99)) -> list[tuple]:
    """Tilting points and calibrated regions for the first repetition that fits, as coordinate rows."""
    rows = []
    sols = tilt_points(exp.shape, exp.nominal, exp.tilt_target)
    for k, s in enumerate(sols):
        rows.append(("tilting_point", exp.nominal, k, 0, *s.sigma_bar))
    for rep in range(exp.repetitions):
        base = rngmod.stream(exp.seed, rep)
        _, y = simulate_batch(exp.truth, exp.m, 1, rngmod.substream(base, 0))
        try:
            setup = exp.estimator.fit(y[0], exp.n, rngmod.substream(base, 1))
            break
        except (FitError, ValueError, np.linalg.LinAlgError):
            continue
    else:
        return rows
    tilted = [m for m in exp.methods if m.kind == "tilted"]
    B = tilted[0].B if tilted else 200
    draws = is_bootstrap(setup, exp.estimator, build_kernels(setup, sols), B, rngmod.stream(exp.seed, rep, 99),
                         ("non-studentized",))
    for lev in levels:
        c = calibrate_region(draws, exp.shape, 1 - lev, "non-studentized")
        for i, (x, yv) in enumerate(region_polygon(setup, exp.shape, c)):
            rows.append(("region", lev, rep, i, x, yv))
    rows.append(("estimate", 0.0, rep, 0, *setup.theta_hat))
    return rows


def cmd_experiment(cfg: RunConfig, args, config_path) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    threads = args.threads or cfg.threads or os.cpu_count() or 1
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = experiment_from_config(cfg, seed, args.repetitions)
    t0 = time.time()
    ckpt = out / "checkpoint.jsonl"
    report, results = run_experiment(exp, threads, ckpt, resume=args.resume)
    wall = time.time() - t0
    write_report_csv(out / "report.csv", report)
    prov = {"config": cfg.raw, "seed": seed, "repetitions": exp.repetitions, "threads": threads,
            "input_sha256": sha256_files(config_path), "wall_time_s": wall, "version": __version__,
            "discarded": report.discarded, "redrawn": report.redrawn,
            "resume_token": {"checkpoint": str(ckpt), "completed": len(results)}}
    write_json(out / "provenance.json", prov)
    if cfg.output.plot_data:
        with (out / "plot_data.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("item", "level", "index", "vertex", "x", "y"))
            for row in plot_data(exp):
                w.writerow([fmt(v) for v in row])
    for r in report.rows:
        print(f"{r.statistic:16s} {r.method:9s} B={r.B:<5d} noncov={r.noncoverage:.4f} "
              f"area={r.area_mean:.4f} sd={r.area_sd:.4f} rel_eff={r.rel_eff:.3g}")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


# --- fit ------------------------------------------------------------------------------


def read_data(path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: cannot parse numeric row: {line!r}") from exc
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ConfigError(f"{path}:{lineno}: expected {width} columns, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return np.array(rows)


def cmd_fit(cfg: RunConfig, args, config_path) -> int:
    if not args.data:
        raise ConfigError("fit needs --data")
    y = read_data(args.data)
    spec0 = cfg.spec
    if y.shape[1] != spec0.obs_dim:
        raise ConfigError(f"data has {y.shape[1]} columns, model expects {spec0.obs_dim}")
    seed = cfg.seed if args.seed is None else args.seed
    res = em_fit(y, spec0, cfg.em.build(), rng=rngmod.stream(seed, 0))
    V = spec_covariance(res.spec).sigma
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"theta": res.params.as_dict(), "loglik": res.loglik, "trace": res.trace, "converged": res.converged,
           "n_iter": res.n_iter, "flagged_empty_state": res.flagged, "V": V, "stationary_mean":
           chain_moments(res.spec).mean, "seed": seed, "input_sha256": sha256_files(config_path, args.data)}
    write_json(out / "fit.json", doc)
    print(json.dumps(_jsonable({"theta": doc["theta"], "loglik": res.loglik}), indent=2))
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilted-boot", description=__doc__)
    p.add_argument("command", choices=("verify", "experiment", "fit"))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.add_argument("--data", help="data file for fit")
    p.add_argument("--repetitions", type=int, help="override experiment.repetitions")
    p.add_argument("--resume", action="store_true", help="continue from out/checkpoint.jsonl")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "verify":
            return cmd_verify(cfg, args)
        if args.command == "experiment":
            return cmd_experiment(cfg, args, args.config)
        return cmd_fit(cfg, args, args.config)
    except ConfigError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, DomainError, OSError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
