"""Acceptance criteria at their stated tolerances.

Each check records a line through ``conftest.record``; the terminal summary
prints one PASS/FAIL line per criterion. Long experiments checkpoint under
``out/acceptance/<hash of sources and config>/`` so an interrupted run resumes bit-identically.
"""
import hashlib
import itertools
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import optimize, stats
from scipy.special import logsumexp

from tilted_boot import rng as rngmod
from tilted_boot.bootstrap import (MeanEstimator, build_kernels, is_bootstrap, mean_setup_from_spec,
                                   naive_bootstrap, stratified_noncoverage, tilt_points)
from tilted_boot.chain_calculus import (chain_moments, empirical_covariance_oracle, lambda_hessian, lan_diagnostic,
                                        poisson_residual, solve_poisson, spec_covariance)
from tilted_boot.cli import experiment_from_config, run_experiment
from tilted_boot.config import load_config
from tilted_boot.emissions import Gaussian
from tilted_boot.inference import EmConfig, em_fit, em_fit_batch, log_likelihood
from tilted_boot.model import HmmSpec, TransitionMatrix, simulate, simulate_batch, stationary_distribution
from tilted_boot.tilting import (HalfPlane, build_tilted_kernel, fixed_point_tilt, log_weight, log_weights_batch,
                                 make_region, sample_tilted, solve_strata)

from conftest import COV_G3, SIGMA_G3, make_gauss3, make_pois2, random_spec, record

ROOT = Path(__file__).resolve().parents[1]
SEED = 2024
KIND = ("non-studentized",)


def source_hash(*extra) -> str:
    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "tilted_boot").glob("*.py")) + list(extra):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def check(crit, name, cond, detail=""):
    record(crit, name, cond, detail)
    print(f"criterion {crit} {name}: {'PASS' if cond else 'FAIL'} {detail}")
    assert cond, f"criterion {crit} {name}: {detail}"


# --- 1 -----------------------------------------------------------------------------


def test_c1_covariance_triangle():
    t0 = time.time()
    spec = make_gauss3()
    sigma = spec_covariance(spec).sigma
    check(1, "formula", np.allclose(sigma, SIGMA_G3, atol=5e-6), f"{sigma.round(5).tolist()}")
    herr = np.abs(lambda_hessian(spec) - sigma).max()
    check(1, "Hessian within 1e-3", herr <= 1e-3, f"max abs {herr:.2e}")
    emp = empirical_covariance_oracle(spec, 100_000, 200, rngmod.stream(SEED, 1))
    z = np.abs(emp.sigma - sigma) / emp.stderr
    check(1, "empirical within 3 MC SE (supplementary)", z.max() <= 3, f"max |z| {z.max():.2f}")
    dt = time.time() - t0
    check(1, "runtime < 1 min", dt < 60, f"{dt:.1f}s")


@pytest.mark.xfail(strict=True, reason="at n=1e5 and 200 paths the sample covariance has about 10% relative "
                                       "standard error, so a 5% tolerance is met only by chance")
def test_c1_empirical_five_percent():
    spec = make_gauss3()
    sigma = spec_covariance(spec).sigma
    emp = empirical_covariance_oracle(spec, 100_000, 200, rngmod.stream(SEED, 1))
    rel = np.abs(emp.sigma - sigma) / np.abs(sigma)
    check(1, "empirical within 5%", rel.max() <= 0.05,
          f"max rel {rel.max():.4f}; entrywise MC SE {(emp.stderr / np.abs(sigma)).max():.3f}")


# --- 2 -----------------------------------------------------------------------------


def test_c2_poisson_equation():
    t0 = time.time()
    spec = make_gauss3()
    sol = solve_poisson(spec.P, chain_moments(spec).gamma)
    err = np.abs(sol.delta - np.array([1.153846, 0.0, -1.153846])[:, None]).max()
    exact = np.abs(sol.delta - np.array([15 / 13, 0.0, -15 / 13])[:, None]).max()
    check(2, "three-state Gaussian solution", err <= 1e-6 and exact <= 1e-9, f"vs 6dp {err:.1e}, vs 15/13 {exact:.1e}")
    r = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(100):
        d, ell = int(r.integers(1, 11)), int(r.integers(1, 4))
        P = r.dirichlet(np.ones(d) * 0.7, size=d) * 0.98 + 0.02 / d
        pi = stationary_distribution(P)
        g = r.normal(size=(d, ell))
        g -= pi @ g
        worst = max(worst, poisson_residual(P, g, solve_poisson(P, g, pi=pi).delta))
    check(2, "residual on 100 random chains", worst <= 1e-10, f"max residual {worst:.1e}")
    check(2, "runtime", time.time() - t0 < 30, f"{time.time() - t0:.2f}s")


# --- 3 -----------------------------------------------------------------------------


def test_c3_large_deviation_scales():
    sq, ci = make_region("square", 0.95).c, make_region("circle", 0.95).c
    check(3, "LD scales", abs(sq - 2.2365) <= 1e-3 and abs(ci - 2.4477) <= 1e-3, f"square {sq:.5f} circle {ci:.5f}")


@pytest.mark.parametrize("shape, ref", [("square", 2.4613), ("circle", 2.655)])
def test_c3_fixed_points(shape, ref):
    t0 = time.time()
    sols = solve_strata(make_region(shape, 0.95), "tangent")
    r = sols[0].r
    cone = fixed_point_tilt(make_region(shape, 0.95), 0, target="cone").r
    check(3, f"{shape} r", abs(r - ref) <= 0.07 and time.time() - t0 < 30,
          f"r {r:.5f} (cone stratum {cone:.5f}) vs {ref}")


@pytest.mark.xfail(strict=True, reason="the scalar Mills-ratio fixed point at c = 2.2365 is 2.43438, not 2.4508")
def test_c3_half_plane_control():
    c = make_region("square", 0.95).c
    r = fixed_point_tilt(HalfPlane((0.0, 1.0), c), tol=1e-12, max_iter=500).r
    f = lambda s: s - 0.5 * np.exp(stats.norm.logpdf(c + s) - stats.norm.logsf(c + s))  # noqa: E731
    oracle = optimize.brentq(f, 0.0, 10.0, xtol=1e-14)
    assert abs(r - oracle) <= 1e-9
    check(3, "half-plane control", abs(r - 2.4508) <= 1e-3, f"r {r:.5f} (independent root {oracle:.5f}) vs 2.4508")


# --- 4 -----------------------------------------------------------------------------


def test_c4_lan_and_class_c():
    t0 = time.time()
    spec = make_gauss3()
    lan = lan_diagnostic(spec, [0.5, 0.0], 5000, 2000, rngmod.stream(SEED, 4))
    check(4, "LAN mean", abs(lan.mean + 1.24680) <= 3 * lan.mean_se, f"{lan.mean:.4f} ± {lan.mean_se:.4f}")
    check(4, "LAN variance", abs(lan.variance - 2.49359) <= 0.1 * 2.49359, f"{lan.variance:.4f}")
    setup = mean_setup_from_spec(spec, 5000)
    sol = tilt_points("square", 0.95)[0]
    kern = build_tilted_kernel(spec, sol.sigma_bar, setup.stud, setup.J, setup.delta, 5000, mu_hat=setup.mu_hat)
    g = rngmod.stream(SEED, 4, 1)
    L = np.concatenate([log_weights_batch(kern, s, spec.features(o).sum(axis=1))
                        for s, o in (simulate_batch(spec, 5000, 200, g) for _ in range(10))])
    se = L.std(ddof=1) / np.sqrt(len(L))
    s2 = sol.sigma_l**2
    check(4, "class-C mean", abs(L.mean() - s2 / 2) <= 3 * se, f"{L.mean():.4f} ± {se:.4f} vs {s2 / 2:.4f}")
    dt = time.time() - t0
    check(4, "runtime < 5 min", dt < 300, f"{dt:.1f}s")


# --- 5, 6 --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fixed_g3():
    spec = make_gauss3()
    setup = mean_setup_from_spec(spec, 100)
    return setup, MeanEstimator(spec), build_kernels(setup, tilt_points("square", 0.95))


@pytest.fixture(scope="module")
def naive_reference(fixed_g3):
    setup, est, _ = fixed_g3
    draws = naive_bootstrap(setup, est, 100_000, rngmod.stream(SEED, 5), KIND)
    return stratified_noncoverage(draws, "square", make_region("square", 0.95).c)


def test_c5_unbiasedness(fixed_g3, naive_reference):
    t0 = time.time()
    setup, est, kernels = fixed_g3
    c = make_region("square", 0.95).c
    e = stratified_noncoverage(is_bootstrap(setup, est, kernels, 2000, rngmod.stream(SEED, 5, 1), KIND), "square", c)
    se = np.hypot(e.se, naive_reference.se)
    check(5, "IS vs naive B=1e5", abs(e.u - naive_reference.u) <= 3 * se,
          f"IS {e.u:.5f} naive {naive_reference.u:.5f} combined SE {se:.5f}")
    check(5, "runtime < 10 min", time.time() - t0 < 600, f"{time.time() - t0:.1f}s")


def test_c6_relative_efficiency(fixed_g3, naive_reference):
    t0 = time.time()
    setup, est, kernels = fixed_g3
    c = make_region("square", 0.95).c
    B, R = 200, 300
    us = [stratified_noncoverage(is_bootstrap(setup, est, kernels, B, rngmod.stream(SEED, 6, i), KIND),
                                 "square", c).u for i in range(R)]
    u = naive_reference.u
    ratio = (u * (1 - u) / B) / np.var(us, ddof=1)
    check(6, "variance ratio >= 3", ratio >= 3, f"naive/tilted {ratio:.2f} over {R} runs of B={B}")
    check(6, "runtime < 10 min", time.time() - t0 < 600, f"{time.time() - t0:.1f}s")


# --- 7, 8 --------------------------------------------------------------------------


def experiment(name, reps):
    path = ROOT / "configs" / f"{name}.json"
    cfg = load_config(path)
    exp = experiment_from_config(cfg, cfg.seed, reps)
    ck = ROOT / "out" / "acceptance" / source_hash(path) / f"{name}-{reps}.jsonl"
    ck.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    report, _ = run_experiment(exp, threads=1, checkpoint=ck, resume=True)
    return report, time.time() - t0


@pytest.mark.slow
@pytest.mark.parametrize("name", ["gauss3_square", "gauss3_circle"])
def test_c7_gaussian_coverage(name):
    report, dt = experiment(name, 5000)
    for r in report.rows:
        print(f"  {r.statistic:16s} {r.method:9s} {r.B:5d} noncov {r.noncoverage:.4f} area {r.area_mean:.4f} "
              f"sd {r.area_sd:.4f} rel_eff {r.rel_eff:.2f}")
    ok = True
    for r in report.rows:
        ok &= record(7, f"{name} {r.statistic} {r.method}-{r.B} non-coverage", 0.035 <= r.noncoverage <= 0.065,
                     f"{r.noncoverage:.4f} ± {r.mc_se_noncoverage:.4f}")
    for kind in ("non-studentized", "studentized"):
        o = report.row(kind, "ordinary", 1000)
        t = report.row(kind, "tilted", 200)
        ok &= record(7, f"{name} {kind} area tilted-200 vs ordinary", abs(t.area_mean / o.area_mean - 1) <= 0.03,
                     f"{t.area_mean:.4f} vs {o.area_mean:.4f}")
        ok &= record(7, f"{name} {kind} area SD tilted-200 vs ordinary", abs(t.area_sd / o.area_sd - 1) <= 0.10,
                     f"{t.area_sd:.4f} vs {o.area_sd:.4f}")
        for B in (100, 52):
            s = report.row(kind, "tilted", B)
            record(7, f"{name} {kind} area SD tilted-{B} vs ordinary", None,
                   f"{s.area_sd:.4f} vs {o.area_sd:.4f} ({s.area_sd / o.area_sd - 1:+.1%})")
    ok &= record(7, f"{name} runtime", dt <= 7200, f"{dt:.0f}s, {report.discarded} discarded")
    assert ok


def pois2_report():
    report, dt = experiment("pois2_square", 500)
    rows = {r.B: r for r in report.rows if r.method == "tilted"}
    return report, rows, report.row("non-studentized", "ordinary", 1000), dt


@pytest.mark.slow
def test_c8_poisson_runtime():
    report, _, _, dt = pois2_report()
    for r in report.rows:
        print(f"  {r.method:9s} {r.B:5d} noncov {r.noncoverage:.4f} area {r.area_mean:.4f} sd {r.area_sd:.4f}")
        record(8, f"{r.method}-{r.B} non-coverage", None, f"{r.noncoverage:.4f} ± {r.mc_se_noncoverage:.4f}")
    check(8, "runtime", dt <= 7200, f"{dt:.0f}s, {report.discarded} discarded")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="IS calibration of the refitted EM statistic has a heavy upper tail in c "
                                       "(max area 30 vs 6.5 ordinary), which inflates the mean area")
def test_c8_poisson_area():
    _, rows, o, _ = pois2_report()
    check(8, "area tilted-200 vs ordinary", abs(rows[200].area_mean / o.area_mean - 1) <= 0.10,
          f"{rows[200].area_mean:.4f} vs {o.area_mean:.4f}")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="median c shrinks as B shrinks, so regions get smaller, not larger")
def test_c8_poisson_degradation():
    _, rows, _, _ = pois2_report()
    a = [rows[B].area_mean for B in (200, 100, 52)]
    check(8, "area increases as B shrinks", a[0] <= a[1] <= a[2], " <= ".join(f"{v:.4f}" for v in a))


# --- 9 -----------------------------------------------------------------------------


def test_c9_em_monotone():
    bad = 0
    total = 0
    for spec, m in ((make_gauss3(), 200), (make_pois2(), 100), (make_pois2(), 5000)):
        _, obs = simulate_batch(spec, m, 50, rngmod.stream(SEED, 9, m))
        fit = em_fit_batch(obs, spec, EmConfig(restarts=1), record_trace=True)
        bad += int((~fit.monotone).sum())
        total += len(obs)
    check(9, "monotone likelihood", bad == 0, f"{total - bad}/{total} fits monotone")


TRUTH_P2 = np.array([0.197, 0.61, 0.251, 2.0])
TOL_P2 = np.array([0.06, 0.06, 0.05, 0.05])


@pytest.mark.xfail(strict=True, reason="the sampling SD of the lambda_1 MLE at m=5000 is about 0.086, "
                                       "wider than the 0.05 tolerance")
def test_c9_recovery():
    spec = make_pois2()
    y = simulate(spec, 5000, rngmod.stream(SEED, 9)).observations
    res = em_fit(y, spec, EmConfig(restarts=5), rng=rngmod.stream(SEED, 9, 1))
    est = res.params.values
    names = res.params.layout.names()
    check(9, "recovery at m=5000", bool(np.all(np.abs(est - TRUTH_P2) <= TOL_P2)),
          ", ".join(f"{k} {v:.4f}" for k, v in zip(names, est)))


def test_c9_recovery_sampling_distribution():
    spec = make_pois2()
    _, obs = simulate_batch(spec, 5000, 200, rngmod.stream(SEED, 9, 2))
    th = em_fit_batch(obs, spec, EmConfig(restarts=1)).parameter_matrix()
    bias = th.mean(axis=0) - TRUTH_P2
    se = th.std(axis=0, ddof=1) / np.sqrt(len(th))
    hit = np.mean(np.all(np.abs(th - TRUTH_P2) <= TOL_P2, axis=1))
    check(9, "recovery unbiased over 200 datasets (supplementary)", bool(np.all(np.abs(bias) <= 3 * se)),
          f"bias {np.round(bias, 4).tolist()}, SD {np.round(th.std(axis=0), 3).tolist()}, "
          f"{hit:.0%} of datasets within tolerance")


def _enumerate(spec, y):
    m = len(y)
    paths = np.array(list(itertools.product(range(spec.d), repeat=m)))
    lb = np.stack([e.log_density(y) for e in spec.emissions], axis=1)
    lp = np.log(spec.pi)[paths[:, 0]] + lb[np.arange(m), paths].sum(axis=1)
    if m > 1:
        lp += np.log(spec.P)[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return logsumexp(lp)


def test_c9_enumeration():
    r = np.random.default_rng(SEED)
    worst, count = 0.0, 0
    for family in ("gaussian", "poisson"):
        for d in (1, 2, 3, 4, 5, 6):
            m = 1
            while d**m <= 10_000 and m <= 14:
                spec = random_spec(r, d, family=family)
                _, obs = simulate_batch(spec, m, 1, r)
                ref = _enumerate(spec, obs[0])
                worst = max(worst, abs(log_likelihood(spec, obs[0]) - ref) / abs(ref))
                count += 1
                m += 1
    check(9, "forward vs enumeration", worst <= 1e-9, f"{count} instances, max rel err {worst:.1e}")


# --- 10 ----------------------------------------------------------------------------


def test_c10_d1_reduction():
    spec = HmmSpec(TransitionMatrix([[1.0]]), (Gaussian([1.0, -2.0], COV_G3),))
    g = spec.emissions[0]
    n = 100
    setup = mean_setup_from_spec(spec, n)
    ok = record(10, "Delta = 0", np.allclose(setup.delta.delta, 0), "")
    ok &= record(10, "Sigma = emission covariance", np.allclose(spec_covariance(spec).sigma, COV_G3), "")
    kernels = build_kernels(setup, tilt_points("square", 0.95))
    ok &= record(10, "q = 1", all(np.allclose(k.q, 1) for k in kernels), "")
    ok &= record(10, "h = tilted f", all(np.allclose(k.emissions[0].mean(), g.mean() + g.cov() @ k.t)
                                         and np.allclose(k.emissions[0].cov(), g.cov()) for k in kernels), "")
    # log dP/dQ is the iid exponential-tilting weight n·K(t) - t·S_n
    states, obs = sample_tilted(spec, kernels[0], n, 5, rngmod.stream(SEED, 10))
    S = obs.sum(axis=1)
    iid = n * g.log_mgf(kernels[0].t) - S @ kernels[0].t
    from tilted_boot.model import Path as HPath
    lw = [log_weight(kernels[0], spec, HPath(states[b], obs[b])) for b in range(5)]
    ok &= record(10, "weights are iid tilting weights", np.allclose(lw, iid, rtol=1e-10), "")
    # end to end: T is exactly N(0, I), so the square non-coverage at c(0.95) is 0.05
    est = MeanEstimator(spec)
    e = stratified_noncoverage(is_bootstrap(setup, est, kernels, 4000, rngmod.stream(SEED, 10, 1), KIND),
                               "square", make_region("square", 0.95).c)
    ok &= record(10, "IS non-coverage = 0.05", abs(e.u - 0.05) <= 3 * e.se, f"{e.u:.5f} ± {e.se:.5f}")
    print(f"criterion 10: {'PASS' if ok else 'FAIL'}")
    assert ok
