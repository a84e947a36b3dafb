"""Naive and importance-sampling parametric bootstrap, calibration, experiments."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .chain_calculus import PoissonSolution, asymptotic_covariance_batch, chain_moments, solve_poisson
from .emissions import Poisson, ZeroModifiedPoisson
from .inference import EmConfig, FitError, Studentizer, em_fit, em_fit_batch, inv_sqrt_batch, pilot_jacobian
from .model import HmmSpec, ModelError, simulate_batch
from .tilting import (TiltedKernel, build_tilted_kernel, exit_scale, log_weights_batch, make_region,
                      solve_strata, stratum_index)

log = logging.getLogger(__name__)

KINDS = ("non-studentized", "studentized")


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    m: int
    n: int
    B: int
    allocation: tuple | None = None
    statistic_kind: str = "non-studentized"
    seed: int = 0

    def __post_init__(self):
        if min(self.m, self.n, self.B) < 1:
            raise ValueError("m, n and B must be >= 1")
        if self.statistic_kind not in KINDS:
            raise ValueError(f"statistic_kind must be one of {KINDS}")
        if self.allocation is not None and sum(self.allocation) != self.B:
            raise ValueError("allocation must sum to B")

    def strata_sizes(self, n_strata: int = 4) -> tuple:
        if self.allocation is not None:
            return tuple(self.allocation)
        base, extra = divmod(self.B, n_strata)
        return tuple(base + (k < extra) for k in range(n_strata))


# --- estimators --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BootstrapSetup:
    """Everything the resampler needs about the fitted model.

    ``spec`` is the resampling law with additive features; ``center`` is the
    bootstrap-world value of the statistic, ``J`` maps feature means to it.
    """

    spec: HmmSpec
    theta_hat: np.ndarray
    center: np.ndarray
    J: np.ndarray
    stud: Studentizer
    delta: PoissonSolution
    mu_hat: np.ndarray
    n: int
    m: int
    fit_spec: HmmSpec | None = None


class MeanEstimator:
    """Stationary mean estimated by the sample mean (g = id).

    The fitted HMM supplies the resampling law and Σ̂. For the studentized
    statistic, V* comes from ``vstar_steps`` EM iterations started at θ̂ on each
    replicate, followed by the closed-form asymptotic covariance.
    """

    name = "mean"

    def __init__(self, init: HmmSpec, em: EmConfig = EmConfig(), vstar_steps: int = 1):
        self.init = init
        self.em = em
        self.vstar_steps = vstar_steps

    def fit(self, y: np.ndarray, n: int, rng: np.random.Generator) -> BootstrapSetup:
        res = em_fit(y, self.init, self.em, rng=rng)
        spec = res.spec
        mom = chain_moments(spec)
        sol = solve_poisson(spec.P, mom.gamma, pi=mom.pi)
        sigma = asymptotic_covariance_batch(spec.P[None], mom.means[None], mom.covs[None])[0]
        stud = Studentizer.from_matrix(sigma)
        theta_hat = spec.features(y).mean(axis=0)
        return BootstrapSetup(spec=spec, theta_hat=theta_hat, center=mom.mean, J=np.eye(spec.dim), stud=stud,
                              delta=sol, mu_hat=mom.mean, n=n, m=len(y), fit_spec=spec)

    def replicates(self, setup: BootstrapSetup, obs: np.ndarray, studentized: bool):
        theta = setup.spec.features(obs).mean(axis=1)
        ok = np.all(np.isfinite(theta), axis=1)
        vstar = None
        if studentized:
            cfg = replace(self.em, max_iter=self.vstar_steps, restarts=1)
            fit = em_fit_batch(obs, setup.fit_spec, cfg)
            means, covs = fit.feature_moments()
            vstar = asymptotic_covariance_batch(fit.P, means, covs)
            ok &= fit.ok
        return theta, vstar, ok


class EMEstimator:
    """Selected coordinates of the EM estimate refitted on every replicate.

    The additive component is the feature map of ``feature_spec`` emissions,
    and J comes from a pilot regression of θ̂* on feature means.
    """

    name = "em"

    def __init__(self, init: HmmSpec, target: tuple, em: EmConfig = EmConfig(), pilot_B0: int = 100,
                 studentizer: str = "pilot"):
        if studentizer not in ("pilot", "linear"):
            raise ValueError("studentizer must be 'pilot' or 'linear'")
        self.studentizer = studentizer
        self.init = init
        self.target = tuple(target)
        self.em = em
        self.pilot_B0 = pilot_B0

    def _feature_spec(self, spec: HmmSpec) -> HmmSpec:
        if isinstance(spec.emissions[0], Poisson):
            return spec.with_emissions([ZeroModifiedPoisson(e.rate) for e in spec.emissions])
        return spec

    def _theta(self, fit):
        return fit.parameter_matrix()[:, list(self.target)]

    def fit(self, y: np.ndarray, n: int, rng: np.random.Generator) -> BootstrapSetup:
        res = em_fit(y, self.init, self.em, rng=rngmod.substream(rng, 0))
        spec = res.spec
        theta_hat = res.params.values[list(self.target)]
        fspec = self._feature_spec(spec)
        cfg = replace(self.em, restarts=1)

        def statistic(obs):
            fit = em_fit_batch(obs, spec, cfg)
            th = self._theta(fit)
            th[~fit.ok] = np.nan
            return th

        smap = pilot_jacobian(fspec, _nan_guard(statistic), n, self.pilot_B0, rngmod.substream(rng, 1),
                              theta0=theta_hat)
        J = smap.jac_at(None)
        mom = chain_moments(fspec)
        sol = solve_poisson(fspec.P, mom.gamma, pi=mom.pi)
        sigma = asymptotic_covariance_batch(fspec.P[None], mom.means[None], mom.covs[None])[0]
        V = J @ sigma @ J.T if self.studentizer == "linear" else n * smap.pilot_cov
        stud = Studentizer.from_matrix(V)
        return BootstrapSetup(spec=fspec, theta_hat=theta_hat, center=theta_hat, J=J, stud=stud, delta=sol,
                              mu_hat=mom.mean, n=n, m=len(y), fit_spec=spec)

    def replicates(self, setup: BootstrapSetup, obs: np.ndarray, studentized: bool):
        fit = em_fit_batch(obs, setup.fit_spec, replace(self.em, restarts=1))
        theta = self._theta(fit)
        ok = fit.ok & np.all(np.isfinite(theta), axis=1)
        vstar = None
        if studentized:
            if isinstance(setup.fit_spec.emissions[0], Poisson):
                fam = type(fit.family)(zero_feature=True)
                means, covs = fam.feature_moments(fit.params)
            else:
                means, covs = fit.feature_moments()
            sig = asymptotic_covariance_batch(fit.P, means, covs)
            vstar = setup.J @ sig @ setup.J.T
        return theta, vstar, ok


def _nan_guard(statistic):
    # failed pilot fits are dropped from the regression by refilling with the mean of the others
    def wrapped(obs):
        th = statistic(obs)
        bad = ~np.all(np.isfinite(th), axis=1)
        if bad.all():
            raise FitError("every pilot replicate failed to fit")
        th[bad] = np.nanmean(th[~bad], axis=0)
        return th

    return wrapped


# --- draws -------------------------------------------------------------------------


@dataclass(eq=False)
class DrawSet:
    """Standardized replicates of one resampling scheme.

    ``stratum`` is -1 for naive draws; ``sizes`` maps stratum -> count.
    """

    T: dict
    log_w: np.ndarray
    stratum: np.ndarray
    sizes: dict
    redrawn: int = 0
    theta: np.ndarray | None = None

    @property
    def B(self) -> int:
        return int(sum(self.sizes.values()))

    @property
    def naive(self) -> bool:
        return bool(np.all(self.stratum < 0))


def _standardize(setup: BootstrapSetup, theta, vstar, kinds):
    rt = np.sqrt(setup.n)
    diff = theta - setup.center
    out = {}
    ok = np.ones(len(theta), dtype=bool)
    for kind in kinds:
        if kind == "non-studentized":
            out[kind] = rt * diff @ setup.stud.inv_sqrt.T
        else:
            w, good = inv_sqrt_batch(vstar)
            out[kind] = rt * np.einsum("bij,bj->bi", w, diff)
            ok &= good
    for v in out.values():
        ok &= np.all(np.isfinite(v), axis=1)
    return out, ok


def _draw(setup, estimator, size, kinds, key_rng, sampler, max_attempts: int = 20):
    """Draw ``size`` usable replicates, redrawing failures from fresh substreams."""
    Ts = {k: [] for k in kinds}
    logw, thetas = [], []
    need, redrawn = size, 0
    for attempt in range(max_attempts):
        r = rngmod.substream(key_rng, attempt)
        states, obs, lw = sampler(need, r)
        theta, vstar, ok = estimator.replicates(setup, obs, "studentized" in kinds)
        T, okT = _standardize(setup, theta, vstar, kinds)
        ok &= okT & np.isfinite(lw)
        for k in kinds:
            Ts[k].append(T[k][ok])
        logw.append(lw[ok])
        thetas.append(theta[ok])
        bad = int((~ok).sum())
        redrawn += bad
        need = bad
        if need == 0:
            break
    else:
        raise FitError(f"{need} replicates still failing after {max_attempts} redraw rounds")
    return ({k: np.concatenate(v) for k, v in Ts.items()}, np.concatenate(logw), np.concatenate(thetas), redrawn)


def naive_bootstrap(setup: BootstrapSetup, estimator, B: int, rng: np.random.Generator,
                    kinds=KINDS) -> DrawSet:
    spec, n = setup.spec, setup.n

    def sampler(size, r):
        states, obs = simulate_batch(spec, n, size, r)
        return states, obs, np.zeros(size)

    T, lw, th, redrawn = _draw(setup, estimator, B, kinds, rng, sampler)
    return DrawSet(T=T, log_w=lw, stratum=np.full(B, -1), sizes={-1: B}, redrawn=redrawn, theta=th)


def is_bootstrap(setup: BootstrapSetup, estimator, kernels: list[TiltedKernel], B: int,
                 rng: np.random.Generator, kinds=KINDS, allocation=None) -> DrawSet:
    """Stratified importance-sampling bootstrap; stratum k is drawn under kernels[k]."""
    cfg_sizes = BootstrapConfig(setup.m, setup.n, B, allocation).strata_sizes(len(kernels))
    spec, n = setup.spec, setup.n
    Ts = {k: [] for k in kinds}
    lws, strata, thetas = [], [], []
    redrawn = 0
    for k, (kern, Bk) in enumerate(zip(kernels, cfg_sizes)):
        if Bk == 0:
            continue

        def sampler(size, r, kern=kern):
            states, obs = simulate_batch(spec, n, size, r, transition=kern.q, emissions=kern.emissions)
            S = spec.features(obs).sum(axis=1)
            return states, obs, log_weights_batch(kern, states, S)

        T, lw, th, rd = _draw(setup, estimator, Bk, kinds, rngmod.substream(rng, k), sampler)
        for kk in kinds:
            Ts[kk].append(T[kk])
        lws.append(lw)
        thetas.append(th)
        strata.append(np.full(Bk, k))
        redrawn += rd
    return DrawSet(T={k: np.concatenate(v) for k, v in Ts.items()}, log_w=np.concatenate(lws),
                   stratum=np.concatenate(strata), sizes={k: s for k, s in enumerate(cfg_sizes) if s},
                   redrawn=redrawn, theta=np.concatenate(thetas))


# --- estimation and calibration ------------------------------------------------------


@dataclass(frozen=True)
class ISEstimate:
    u: float
    variance: float
    ess: float
    per_stratum: dict = field(default_factory=dict)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))


def _masses(draws: DrawSet, shape: str, kind: str):
    """Per-draw exit scale and its contribution weight w/B_k (zero outside its own stratum)."""
    T = draws.T[kind]
    scale = exit_scale(shape, T)
    if draws.naive:
        return scale, np.full(len(T), 1.0 / draws.B), np.ones(len(T))
    w = np.exp(draws.log_w)
    own = stratum_index(T) == draws.stratum
    sizes = np.array([draws.sizes[s] for s in draws.stratum], dtype=float)
    wk = np.where(own, w, 0.0)
    return scale, wk / sizes, wk


def stratified_noncoverage(draws: DrawSet, shape: str, c: float, kind: str = "non-studentized") -> ISEstimate:
    """û(c) = Σ_k B_k⁻¹ Σ_b w_b 1{T_b in stratum k, outside c·A} with its variance."""
    scale, _, wk = _masses(draws, shape, kind)
    hit = np.where(scale > c, wk, 0.0)
    u = var = 0.0
    per = {}
    for s, Bk in draws.sizes.items():
        sel = draws.stratum == s
        uk = float(hit[sel].sum() / Bk)
        vk = float((hit[sel] ** 2).sum() / Bk)
        per[s] = (uk, max(vk - uk * uk, 0.0) / Bk)
        u += uk
        var += per[s][1]
    s2 = float((hit**2).sum())
    ess = float(hit.sum() ** 2 / s2) if s2 > 0 else 0.0
    return ISEstimate(u=u, variance=var, ess=ess, per_stratum=per)


def noncoverage_curve(draws: DrawSet, shape: str, kind: str = "non-studentized"):
    """Breakpoints c (ascending, starting at 0) and û(c) on [c_i, c_{i+1})."""
    scale, mass, _ = _masses(draws, shape, kind)
    keep = mass > 0
    vals, inv = np.unique(scale[keep], return_inverse=True)
    tot = np.bincount(inv, weights=mass[keep], minlength=len(vals))
    # û at c = vals[i] counts strictly larger scales
    above = np.concatenate([np.cumsum(tot[::-1])[::-1][1:], [0.0]])
    cs = np.concatenate([[0.0], vals])
    us = np.concatenate([[tot[vals > 0].sum()], above])
    return cs, us


def calibrate_region(draws: DrawSet, shape: str, alpha: float = 0.05, kind: str = "non-studentized") -> float:
    """Smallest c with estimated non-coverage û(c) ≤ alpha."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha >= 1:
        return 0.0
    cs, us = noncoverage_curve(draws, shape, kind)
    if len(cs) == 1:
        raise CalibrationError("no resampled draw carries tail mass; increase B or check the tilt")
    idx = int(np.flatnonzero(us <= alpha)[0])
    return float(cs[idx])


def region_area(shape: str, c: float, V, n: int) -> float:
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.shape != (2, 2):
        raise ValueError("region areas are defined for two-dimensional statistics")
    det = np.linalg.det(V)
    if det <= 0:
        raise ValueError("V must be positive definite")
    base = 4.0 * c * c if shape == "square" else np.pi * c * c
    return float(base * np.sqrt(det) / n)


def per_draw_variance(est: ISEstimate, B: int) -> float:
    return est.variance * B


def relative_efficiency(naive: ISEstimate, naive_B: int, tilted: ISEstimate, tilted_B: int) -> float:
    """Per-replicate variance of the naive estimator over that of the IS estimator."""
    den = per_draw_variance(tilted, tilted_B)
    if den <= 0:
        raise ZeroDivisionError("importance-sampling estimator has zero estimated variance")
    return per_draw_variance(naive, naive_B) / den


def region_polygon(setup: BootstrapSetup, shape: str, c: float, npts: int = 200) -> np.ndarray:
    """Boundary of {θ : √m V^{-1/2}(θ̂ - θ) ∈ c·A} in parameter coordinates."""
    from .tilting import region_boundary

    u = region_boundary(shape, c, npts)
    return setup.theta_hat - u @ setup.stud.sqrt.T / np.sqrt(setup.m)


# --- experiments ---------------------------------------------------------------------


@dataclass(frozen=True)
class Method:
    kind: str  # "ordinary" | "tilted"
    B: int

    @property
    def label(self) -> str:
        return f"{self.kind}-{self.B}"


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    truth: HmmSpec
    estimator: object
    theta_true: np.ndarray
    shape: str = "square"
    nominal: float = 0.95
    m: int = 100
    n: int = 100
    methods: tuple = (Method("ordinary", 1000), Method("tilted", 200), Method("tilted", 100), Method("tilted", 52))
    kinds: tuple = KINDS
    repetitions: int = 5000
    seed: int = 0
    tilt_target: str = "tangent"


@dataclass
class RepResult:
    rep: int
    ok: bool
    covered: dict = field(default_factory=dict)  # (kind, label) -> bool
    area: dict = field(default_factory=dict)
    c_star: dict = field(default_factory=dict)
    draw_var: dict = field(default_factory=dict)  # (kind, label) -> per-draw variance at nominal c
    redrawn: int = 0
    error: str = ""

    def to_json(self) -> dict:
        enc = lambda d: {f"{k}|{l}": v for (k, l), v in d.items()}  # noqa: E731
        return {"rep": self.rep, "ok": self.ok, "covered": enc(self.covered), "area": enc(self.area),
                "c_star": enc(self.c_star), "draw_var": enc(self.draw_var), "redrawn": self.redrawn,
                "error": self.error}

    @classmethod
    def from_json(cls, doc: dict) -> "RepResult":
        dec = lambda d: {tuple(k.split("|", 1)): v for k, v in d.items()}  # noqa: E731
        return cls(rep=doc["rep"], ok=doc["ok"], covered=dec(doc["covered"]), area=dec(doc["area"]),
                   c_star=dec(doc["c_star"]), draw_var=dec(doc["draw_var"]), redrawn=doc["redrawn"],
                   error=doc["error"])


_TILT_CACHE: dict = {}


def tilt_points(shape: str, nominal: float, target: str = "tangent"):
    key = (shape, nominal, target)
    if key not in _TILT_CACHE:
        _TILT_CACHE[key] = solve_strata(make_region(shape, nominal), target)
    return _TILT_CACHE[key]


def build_kernels(setup: BootstrapSetup, sols) -> list[TiltedKernel]:
    return [build_tilted_kernel(setup.spec, s.sigma_bar, setup.stud, setup.J, setup.delta, setup.n,
                                mu_hat=setup.mu_hat) for s in sols]


def run_repetition(cfg: ExperimentConfig, rep: int) -> RepResult:
    """One Monte Carlo repetition: fit, resample under every method, record coverage."""
    alpha = 1.0 - cfg.nominal
    region = make_region(cfg.shape, cfg.nominal)
    base = rngmod.stream(cfg.seed, rep)
    try:
        _, y = simulate_batch(cfg.truth, cfg.m, 1, rngmod.substream(base, 0))
        y = y[0]
        setup = cfg.estimator.fit(y, cfg.n, rngmod.substream(base, 1))
    except (FitError, ModelError, ValueError, np.linalg.LinAlgError) as exc:
        log.info("repetition %d discarded: %s", rep, exc)
        return RepResult(rep, False, error=str(exc))
    t_true = np.sqrt(cfg.m) * setup.stud.inv_sqrt @ (setup.theta_hat - cfg.theta_true)
    s_true = float(exit_scale(cfg.shape, t_true))
    res = RepResult(rep, True)
    kernels = None
    try:
        for mi, meth in enumerate(cfg.methods):
            r = rngmod.substream(base, 2, mi)
            if meth.kind == "ordinary":
                draws = naive_bootstrap(setup, cfg.estimator, meth.B, r, cfg.kinds)
            else:
                if kernels is None:
                    kernels = build_kernels(setup, tilt_points(cfg.shape, cfg.nominal, cfg.tilt_target))
                draws = is_bootstrap(setup, cfg.estimator, kernels, meth.B, r, cfg.kinds)
            res.redrawn += draws.redrawn
            for kind in cfg.kinds:
                key = (kind, meth.label)
                c = calibrate_region(draws, cfg.shape, alpha, kind)
                res.c_star[key] = c
                res.covered[key] = bool(s_true <= c)
                res.area[key] = region_area(cfg.shape, c, setup.stud.V, cfg.m)
                est = stratified_noncoverage(draws, cfg.shape, region.c, kind)
                res.draw_var[key] = per_draw_variance(est, draws.B)
    except (FitError, CalibrationError) as exc:
        log.info("repetition %d discarded: %s", rep, exc)
        return RepResult(rep, False, error=str(exc))
    return res


@dataclass(frozen=True)
class ReportRow:
    statistic: str
    method: str
    B: int
    noncoverage: float
    area_mean: float
    area_sd: float
    rel_eff: float
    mc_se_noncoverage: float


@dataclass(eq=False)
class ExperimentReport:
    rows: list
    repetitions: int
    discarded: int
    redrawn: int

    COLUMNS = ("statistic", "method", "B", "noncoverage", "area_mean", "area_sd", "rel_eff", "mc_se_noncoverage")

    def row(self, statistic: str, method: str, B: int) -> ReportRow:
        for r in self.rows:
            if (r.statistic, r.method, r.B) == (statistic, method, B):
                return r
        raise KeyError((statistic, method, B))


def aggregate(cfg: ExperimentConfig, results: list[RepResult]) -> ExperimentReport:
    """Reduce repetitions in index order into report rows."""
    results = sorted(results, key=lambda r: r.rep)
    good = [r for r in results if r.ok]
    rows = []
    ordinary = [m for m in cfg.methods if m.kind == "ordinary"]
    for kind in cfg.kinds:
        ref = None
        if ordinary:
            ref = np.mean([r.draw_var[(kind, ordinary[0].label)] for r in good]) if good else np.nan
        for meth in cfg.methods:
            key = (kind, meth.label)
            cov = np.array([r.covered[key] for r in good], dtype=float)
            area = np.array([r.area[key] for r in good])
            p = 1.0 - cov.mean() if len(cov) else np.nan
            dv = np.mean([r.draw_var[key] for r in good]) if good else np.nan
            if meth.kind == "ordinary":
                eff = 1.0
            else:
                eff = float(ref / dv) if ref is not None and dv > 0 else np.nan
            rows.append(ReportRow(kind, meth.kind, meth.B, float(p), float(area.mean()) if len(area) else np.nan,
                                  float(area.std(ddof=1)) if len(area) > 1 else np.nan, eff,
                                  float(np.sqrt(p * (1 - p) / len(cov))) if len(cov) else np.nan))
    return ExperimentReport(rows=rows, repetitions=len(results), discarded=len(results) - len(good),
                            redrawn=int(sum(r.redrawn for r in results)))


def coverage_experiment(cfg: ExperimentConfig, reps=None, map_fn=map) -> tuple[ExperimentReport, list[RepResult]]:
    """Run repetitions (optionally through a parallel ``map_fn``) and aggregate."""
    reps = range(cfg.repetitions) if reps is None else reps
    results = list(map_fn(_RepRunner(cfg), reps))
    return aggregate(cfg, results), results


class _RepRunner:
    # picklable callable for process pools
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, rep):
        return run_repetition(self.cfg, rep)


def mean_setup_from_spec(spec: HmmSpec, n: int, m: int | None = None) -> BootstrapSetup:
    """Setup with θ̂ = stationary mean of ``spec`` (no fitting); used for fixed-θ̂ studies."""
    mom = chain_moments(spec)
    sol = solve_poisson(spec.P, mom.gamma, pi=mom.pi)
    sigma = asymptotic_covariance_batch(spec.P[None], mom.means[None], mom.covs[None])[0]
    return BootstrapSetup(spec=spec, theta_hat=mom.mean, center=mom.mean, J=np.eye(spec.dim),
                          stud=Studentizer.from_matrix(sigma), delta=sol, mu_hat=mom.mean, n=n,
                          m=n if m is None else m, fit_spec=spec)
