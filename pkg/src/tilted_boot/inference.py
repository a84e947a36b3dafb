"""Likelihood, Baum-Welch EM, statistic maps and studentizers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy.special import gammaln, xlogy

from .chain_calculus import chain_moments, spec_covariance
from .emissions import Gaussian, Poisson, ZeroModifiedPoisson
from .model import HmmSpec, ModelError, TransitionMatrix, simulate_batch

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


# --- forward / backward -------------------------------------------------------


@numba.njit(cache=True)
def _forward_backward(log_b, init, P, want_posteriors):
    """Scaled forward-backward over a batch; x_0 carries no observation.

    log_b: (B, n, d) log emission densities of y_1..y_n; init: (B, d) law of x_0;
    P: (B, d, d). Returns loglik (B,), gamma (B, n+1, d), xi sums (B, d, d).
    """
    B, n, d = log_b.shape
    ll = np.empty(B)
    gamma = np.zeros((B, n + 1, d)) if want_posteriors else np.zeros((1, 1, d))
    xi = np.zeros((B, d, d))
    alpha = np.empty((n + 1, d))
    beta = np.empty((n + 1, d))
    bt = np.empty((n + 1, d))
    c = np.empty(n + 1)
    for b in range(B):
        for j in range(d):
            alpha[0, j] = init[b, j]
        c[0] = 1.0
        tot = 0.0
        ok = True
        for t in range(1, n + 1):
            m = log_b[b, t - 1, 0]
            for j in range(1, d):
                if log_b[b, t - 1, j] > m:
                    m = log_b[b, t - 1, j]
            s = 0.0
            for j in range(d):
                bt[t, j] = np.exp(log_b[b, t - 1, j] - m)
                a = 0.0
                for i in range(d):
                    a += alpha[t - 1, i] * P[b, i, j]
                a *= bt[t, j]
                alpha[t, j] = a
                s += a
            if not (s > 0.0) or not np.isfinite(m):
                ok = False
                break
            for j in range(d):
                alpha[t, j] /= s
            c[t] = s
            tot += np.log(s) + m
        if not ok:
            ll[b] = -np.inf
            continue
        ll[b] = tot
        if not want_posteriors:
            continue
        for j in range(d):
            beta[n, j] = 1.0
        for t in range(n, 0, -1):
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += P[b, i, j] * bt[t, j] * beta[t, j]
                beta[t - 1, i] = acc / c[t]
        for t in range(n + 1):
            s = 0.0
            for j in range(d):
                g = alpha[t, j] * beta[t, j]
                gamma[b, t, j] = g
                s += g
            for j in range(d):
                gamma[b, t, j] /= s
        for t in range(1, n + 1):
            for i in range(d):
                ai = alpha[t - 1, i] / c[t]
                for j in range(d):
                    xi[b, i, j] += ai * P[b, i, j] * bt[t, j] * beta[t, j]
    return ll, gamma, xi


def stationary_batch(P: np.ndarray) -> np.ndarray:
    """Stationary laws of a stack of ergodic chains, shape (B, d)."""
    B, d, _ = P.shape
    a = np.eye(d) - P + 1.0
    pi = np.linalg.solve(np.swapaxes(a, 1, 2), np.ones((B, d, 1)))[..., 0]
    return pi / pi.sum(axis=1, keepdims=True)


def log_emission_matrix(spec: HmmSpec, observations) -> np.ndarray:
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    return np.stack([np.asarray(e.log_density(obs), dtype=float).reshape(len(obs)) for e in spec.emissions], axis=-1)


def log_likelihood(spec: HmmSpec, observations) -> float:
    """Log of the stationary-start HMM likelihood via the scaled forward pass."""
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if len(obs) == 0:
        raise ValueError("observations must be non-empty")
    if obs.shape[1] != spec.obs_dim:
        raise ValueError(f"observations have width {obs.shape[1]}, model expects {spec.obs_dim}")
    lb = log_emission_matrix(spec, obs)[None]
    ll, _, _ = _forward_backward(lb, spec.pi[None], spec.P[None], False)
    return float(ll[0])


# --- parameter vectors -----------------------------------------------------------


@dataclass(frozen=True)
class ParameterLayout:
    d: int
    family: str  # "gaussian" | "poisson"
    obs_dim: int = 1
    tied: bool = True
    zero_feature: bool = False

    def names(self) -> list[str]:
        out = [f"p_{i}{j}" for i in range(self.d) for j in range(self.d) if i != j]
        if self.family == "poisson":
            out += [f"lambda_{j}" for j in range(self.d)]
        else:
            out += [f"mu_{j}_{k}" for j in range(self.d) for k in range(self.obs_dim)]
            iu = list(zip(*np.triu_indices(self.obs_dim)))
            if self.tied:
                out += [f"cov_{k}{l}" for k, l in iu]
            else:
                out += [f"cov_{j}_{k}{l}" for j in range(self.d) for k, l in iu]
        return out

    @property
    def size(self) -> int:
        return len(self.names())

    def index(self, name: str) -> int:
        return self.names().index(name)

    def to_dict(self) -> dict:
        return dict(d=self.d, family=self.family, obs_dim=self.obs_dim, tied=self.tied,
                    zero_feature=self.zero_feature)


def _covs_equal(ems) -> bool:
    return all(np.array_equal(e.cov(), ems[0].cov()) for e in ems)


def layout_for(spec: HmmSpec, tied: bool | None = None) -> ParameterLayout:
    e0 = spec.emissions[0]
    if isinstance(e0, Gaussian):
        if tied is None:
            tied = _covs_equal(spec.emissions)
        return ParameterLayout(spec.d, "gaussian", e0.obs_dim, bool(tied))
    if isinstance(e0, ZeroModifiedPoisson):
        if any(e.zero_shift != 0 for e in spec.emissions):
            raise ValueError("parameter vectors describe untilted models only")
        return ParameterLayout(spec.d, "poisson", 1, True, zero_feature=True)
    if isinstance(e0, Poisson):
        return ParameterLayout(spec.d, "poisson", 1, True)
    raise TypeError(f"no parameter layout for {type(e0).__name__}")


@dataclass(frozen=True, eq=False)
class ParameterVector:
    layout: ParameterLayout
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {v.shape}")
        P = self._transition()
        off = P[~np.eye(self.layout.d, dtype=bool)]
        if np.any(off < 0) or np.any(off > 1) or np.any(np.diag(P) < -1e-12):
            raise ValueError("transition probabilities must lie in [0, 1] with rows summing to at most 1")
        if self.layout.family == "poisson" and np.any(self._rates() <= 0):
            raise ValueError("Poisson rates must be positive")

    @property
    def kappa(self) -> int:
        return self.values.size

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.layout.names(), self.values.tolist()))

    def _transition(self) -> np.ndarray:
        d = self.layout.d
        P = np.zeros((d, d))
        mask = ~np.eye(d, dtype=bool)
        P[mask] = self.values[: d * (d - 1)]
        P[np.diag_indices(d)] = 1.0 - P.sum(axis=1)
        return P

    def _rates(self) -> np.ndarray:
        d = self.layout.d
        return self.values[d * (d - 1): d * (d - 1) + d]

    def to_spec(self) -> HmmSpec:
        lay = self.layout
        d = lay.d
        P = self._transition()
        rest = self.values[d * (d - 1):]
        if lay.family == "poisson":
            cls = ZeroModifiedPoisson if lay.zero_feature else Poisson
            ems = [cls(r) for r in rest[:d]]
        else:
            k = lay.obs_dim
            means = rest[: d * k].reshape(d, k)
            tri = rest[d * k:]
            iu = np.triu_indices(k)
            ntri = len(iu[0])

            def build(vals):
                c = np.zeros((k, k))
                c[iu] = vals
                return c + np.triu(c, 1).T

            if lay.tied:
                covs = [build(tri)] * d
            else:
                covs = [build(tri[j * ntri:(j + 1) * ntri]) for j in range(d)]
            ems = [Gaussian(means[j], covs[j]) for j in range(d)]
        return HmmSpec(TransitionMatrix(P), tuple(ems))

    @classmethod
    def from_spec(cls, spec: HmmSpec, tied: bool | None = None) -> "ParameterVector":
        lay = layout_for(spec, tied)
        d = lay.d
        P = spec.P
        vals = list(P[~np.eye(d, dtype=bool)])
        if lay.family == "poisson":
            vals += [e.rate for e in spec.emissions]
        else:
            iu = np.triu_indices(lay.obs_dim)
            vals += list(np.concatenate([e.mean() for e in spec.emissions]))
            if lay.tied:
                vals += list(spec.emissions[0].cov()[iu])
            else:
                for e in spec.emissions:
                    vals += list(e.cov()[iu])
        return cls(lay, np.array(vals))


# --- EM families -------------------------------------------------------------------


class _GaussianFamily:
    def __init__(self, tied: bool):
        self.tied = tied

    def prepare(self, y):
        pass

    def init(self, specs: list[HmmSpec]) -> dict:
        means = np.array([[e.mean() for e in s.emissions] for s in specs])
        covs = np.array([[e.cov() for e in s.emissions] for s in specs])
        return {"means": means, "covs": covs}

    def log_b(self, prm: dict, idx, y) -> np.ndarray:
        means, covs = prm["means"][idx], prm["covs"][idx]
        B, n, k = y.shape
        d = means.shape[1]
        out = np.empty((B, n, d))
        sign, logdet = np.linalg.slogdet(covs)
        inv = np.linalg.inv(covs)
        for j in range(d):
            diff = y - means[:, j, None, :]
            q = ((diff @ inv[:, j]) * diff).sum(axis=-1)
            out[:, :, j] = -0.5 * (k * np.log(2 * np.pi) + logdet[:, j, None] + q)
        out = np.where((sign <= 0)[:, None, :], -np.inf, out)
        return out

    def m_step(self, prm: dict, idx, y, g, occupied):
        # g: (B, n, d) posteriors of x_1..x_n
        nk = g.sum(axis=1)
        safe = np.where(occupied, nk, 1.0)
        means = np.swapaxes(g, 1, 2) @ y / safe[..., None]
        means = np.where(occupied[..., None], means, prm["means"][idx])
        d = means.shape[1]
        scat = np.empty(means.shape + (means.shape[-1],))
        for j in range(d):
            diff = y - means[:, j, None, :]
            scat[:, j] = np.swapaxes(diff * g[:, :, j, None], 1, 2) @ diff
        if self.tied:
            pooled = scat.sum(axis=1) / y.shape[1]
            covs = np.repeat(pooled[:, None], means.shape[1], 1)
        else:
            covs = scat / safe[..., None, None]
            covs = np.where(occupied[..., None, None], covs, prm["covs"][idx])
        prm["means"][idx] = means
        prm["covs"][idx] = 0.5 * (covs + np.swapaxes(covs, -1, -2))

    def order_key(self, prm: dict) -> np.ndarray:
        return prm["means"][..., 0]

    def permute(self, prm: dict, perm: np.ndarray):
        rows = np.arange(perm.shape[0])[:, None]
        prm["means"] = prm["means"][rows, perm]
        prm["covs"] = prm["covs"][rows, perm]

    def emissions(self, prm: dict, b: int) -> list:
        return [Gaussian(m, c) for m, c in zip(prm["means"][b], prm["covs"][b])]

    def feature_moments(self, prm: dict):
        return prm["means"], prm["covs"]


class _PoissonFamily:
    def __init__(self, zero_feature: bool):
        self.zero_feature = zero_feature

    def init(self, specs: list[HmmSpec]) -> dict:
        return {"rates": np.array([[e.rate for e in s.emissions] for s in specs])}

    def prepare(self, y):
        self._lgam = gammaln(y[..., 0] + 1.0)[..., None]

    def log_b(self, prm, idx, y):
        lam = prm["rates"][idx][:, None, :]
        return y[..., 0][..., None] * np.log(lam) - lam - self._lgam[idx]

    def m_step(self, prm, idx, y, g, occupied):
        nk = g.sum(axis=1)
        rates = np.einsum("bnd,bn->bd", g, y[..., 0]) / np.where(occupied, nk, 1.0)
        rates = np.where(occupied, rates, prm["rates"][idx])
        prm["rates"][idx] = np.maximum(rates, 1e-10)

    def order_key(self, prm):
        return prm["rates"]

    def permute(self, prm, perm):
        rows = np.arange(perm.shape[0])[:, None]
        prm["rates"] = prm["rates"][rows, perm]

    def emissions(self, prm, b):
        cls = ZeroModifiedPoisson if self.zero_feature else Poisson
        return [cls(r) for r in prm["rates"][b]]

    def feature_moments(self, prm):
        lam = prm["rates"]
        if not self.zero_feature:
            return lam[..., None], lam[..., None, None]
        p0 = np.exp(-lam)
        means = np.stack([lam, p0], axis=-1)
        covs = np.empty(lam.shape + (2, 2))
        covs[..., 0, 0] = lam
        covs[..., 0, 1] = covs[..., 1, 0] = -lam * p0
        covs[..., 1, 1] = p0 * (1 - p0)
        return means, covs


def _family(spec: HmmSpec, tied: bool | None):
    lay = layout_for(spec, tied)
    if lay.family == "gaussian":
        return _GaussianFamily(lay.tied), lay
    return _PoissonFamily(lay.zero_feature), lay


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-8
    restarts: int = 5
    tied: bool | None = None
    monotone_slack: float = 1e-9
    occupancy_floor: float = 1e-8


@dataclass(eq=False)
class BatchFit:
    """EM results for a batch of series fitted from a common starting model."""

    family: object
    layout: ParameterLayout
    P: np.ndarray
    params: dict
    loglik: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    monotone: np.ndarray
    flagged: np.ndarray
    traces: list | None = None

    def __len__(self):
        return self.P.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.loglik) & self.monotone

    def subset(self, idx) -> "BatchFit":
        idx = np.asarray(idx)
        return BatchFit(family=self.family, layout=self.layout, P=self.P[idx],
                        params={k: v[idx] for k, v in self.params.items()}, loglik=self.loglik[idx],
                        n_iter=self.n_iter[idx], converged=self.converged[idx], monotone=self.monotone[idx],
                        flagged=self.flagged[idx],
                        traces=None if self.traces is None else [self.traces[i] for i in idx])

    def spec(self, b: int) -> HmmSpec:
        return HmmSpec(TransitionMatrix(self.P[b], check_ergodic=False), tuple(self.family.emissions(self.params, b)))

    def parameter_vector(self, b: int) -> ParameterVector:
        return ParameterVector.from_spec(self.spec(b), tied=self.layout.tied if self.layout.family == "gaussian" else None)

    def parameter_matrix(self) -> np.ndarray:
        """(B, κ) flat parameter vectors in layout order."""
        d = self.layout.d
        off = self.P[:, ~np.eye(d, dtype=bool)]
        if self.layout.family == "poisson":
            return np.concatenate([off, self.params["rates"]], axis=1)
        means = self.params["means"].reshape(len(self), -1)
        iu = np.triu_indices(self.layout.obs_dim)
        covs = self.params["covs"][:, :, iu[0], iu[1]]
        covs = covs[:, 0] if self.layout.tied else covs.reshape(len(self), -1)
        return np.concatenate([off, means, covs], axis=1)

    def feature_moments(self):
        return self.family.feature_moments(self.params)


def _q_transition(P, xi, gamma0):
    pi = stationary_batch(P)
    return np.sum(xlogy(xi, P), axis=(1, 2)) + np.sum(xlogy(gamma0, pi), axis=1)


def em_fit_batch(observations: np.ndarray, init, config: EmConfig = EmConfig(),
                 record_trace: bool = False) -> BatchFit:
    """Baum-Welch on a batch of equal-length series.

    ``init`` is one starting model shared by all series or a sequence with one
    model per series (same family and size).

    The likelihood uses the stationary law of P for x_0; the transition update
    is the usual ratio of expected counts, backtracked towards the previous P
    whenever it fails to raise the complete-data criterion (generalised EM),
    which keeps every trace monotone. States are relabelled by ascending
    first-coordinate emission mean on exit.
    """
    y = np.asarray(observations, dtype=float)
    if y.ndim == 2:
        y = y[..., None]
    B, n, _ = y.shape
    if n < 2:
        raise ValueError("EM needs at least two observations per series")
    inits = [init] * B if isinstance(init, HmmSpec) else list(init)
    if len(inits) != B:
        raise ValueError(f"need one starting model per series ({B}), got {len(inits)}")
    fam, lay = _family(inits[0], config.tied)
    prm = fam.init(inits)
    fam.prepare(y)
    P = np.array([s.P for s in inits])
    ll_prev = np.full(B, -np.inf)
    ll_final = np.full(B, -np.inf)
    n_iter = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    monotone = np.ones(B, dtype=bool)
    flagged = np.zeros(B, dtype=bool)
    traces = [[] for _ in range(B)] if record_trace else None
    active = np.arange(B)
    for it in range(config.max_iter + 1):
        if active.size == 0:
            break
        yb = y[active]
        lb = fam.log_b(prm, active, yb)
        Pa = P[active]
        ll, gamma, xi = _forward_backward(lb, stationary_batch(Pa), Pa, True)
        if record_trace:
            for k, b in enumerate(active):
                traces[b].append(float(ll[k]))
        bad = ~np.isfinite(ll)
        drop = ll < ll_prev[active] - config.monotone_slack
        monotone[active[drop]] = False
        gain = ll - ll_prev[active]
        done = bad | (gain < config.tol) | (it == config.max_iter)
        converged[active[done & ~bad & (gain < config.tol)]] = True
        ll_final[active] = np.where(bad, -np.inf, ll)
        n_iter[active] = it
        keep = ~done
        ll_prev[active] = ll
        active = active[keep]
        if active.size == 0:
            break
        gamma, xi, yb = gamma[keep], xi[keep], yb[keep]
        # emission update
        g = gamma[:, 1:, :]
        occupied = g.sum(axis=1) >= config.occupancy_floor
        flagged[active[~occupied.all(axis=1)]] = True
        fam.m_step(prm, active, yb, g, occupied)
        # transition update with backtracking on the complete-data criterion
        Pold = P[active]
        rows = xi.sum(axis=2, keepdims=True)
        Pnew = np.where(rows > 1e-300, xi / np.where(rows > 1e-300, rows, 1.0), Pold)
        g0 = gamma[:, 0, :]
        q_old = _q_transition(Pold, xi, g0)
        slack = 1e-12 * (1.0 + np.abs(q_old))
        cand = Pnew.copy()
        idx = np.flatnonzero(~(_q_transition(Pnew, xi, g0) >= q_old - slack))
        step = 1.0
        for _ in range(8):
            if idx.size == 0:
                break
            step *= 0.5
            cand[idx] = Pold[idx] + step * (Pnew[idx] - Pold[idx])
            q_new = _q_transition(cand[idx], xi[idx], g0[idx])
            idx = idx[~(q_new >= q_old[idx] - slack[idx])]
        cand[idx] = Pold[idx]
        P[active] = cand / cand.sum(axis=2, keepdims=True)
    # canonical labelling
    perm = np.argsort(fam.order_key(prm), axis=1, kind="stable")
    fam.permute(prm, perm)
    rows = np.arange(B)[:, None, None]
    P = P[rows, perm[:, :, None], perm[:, None, :]]
    return BatchFit(family=fam, layout=lay, P=P, params=prm, loglik=ll_final, n_iter=n_iter,
                    converged=converged, monotone=monotone, flagged=flagged, traces=traces)


@dataclass(eq=False)
class EmResult:
    params: ParameterVector
    spec: HmmSpec
    loglik: float
    trace: list[float]
    converged: bool
    n_iter: int
    flagged: bool
    restarts: list[float] = field(default_factory=list)


def _random_start(spec: HmmSpec, y: np.ndarray, rng: np.random.Generator) -> HmmSpec:
    d = spec.d
    P = rng.dirichlet(np.ones(d), size=d) + 2.0 * np.eye(d)
    P /= P.sum(axis=1, keepdims=True)
    ems = []
    if isinstance(spec.emissions[0], Gaussian):
        sd = y.std(axis=0) + 1e-12
        picks = y[rng.choice(len(y), size=d, replace=False)]
        for j, e in enumerate(spec.emissions):
            ems.append(Gaussian(picks[j] + 0.1 * sd * rng.standard_normal(y.shape[1]), e.cov()))
    else:
        q = np.quantile(y[:, 0], np.sort(rng.random(d)))
        cls = type(spec.emissions[0])
        ems = [cls(max(float(v), 0.05) * float(np.exp(0.2 * rng.standard_normal()))) for v in q]
    return HmmSpec(TransitionMatrix(P), tuple(ems))


def em_fit(observations, init: ParameterVector | HmmSpec, config: EmConfig = EmConfig(),
           rng: np.random.Generator | None = None) -> EmResult:
    """Maximum likelihood by EM with ``config.restarts`` starts (the first is ``init``).

    Raises FitError if every start fails or if any likelihood trace decreases.
    """
    y = np.asarray(observations, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if len(y) < 2:
        raise ValueError("EM needs at least two observations")
    spec0 = init.to_spec() if isinstance(init, ParameterVector) else init
    tied = init.layout.tied if isinstance(init, ParameterVector) else config.tied
    if tied is None and isinstance(spec0.emissions[0], Gaussian):
        tied = _covs_equal(spec0.emissions)
    cfg = EmConfig(config.max_iter, config.tol, config.restarts, tied, config.monotone_slack, config.occupancy_floor)
    rng = np.random.default_rng(0) if rng is None else rng
    starts = [spec0] + [_random_start(spec0, y, rng) for _ in range(max(cfg.restarts, 1) - 1)]
    fit = em_fit_batch(np.repeat(y[None], len(starts), 0), starts, cfg, record_trace=True)
    finals = fit.loglik.tolist()
    if not fit.monotone.all():
        b = int(np.flatnonzero(~fit.monotone)[0])
        raise FitError(f"EM likelihood decreased during a fit: trace {fit.traces[b][-5:]}")
    if not np.isfinite(fit.loglik).any():
        raise FitError("EM failed from every start")
    b = int(np.argmax(fit.loglik))
    best = fit.subset([b])
    if not best.converged[0]:
        log.warning("EM hit max_iter=%d without meeting tol=%g", cfg.max_iter, cfg.tol)
    spec = best.spec(0)
    try:
        spec = HmmSpec(TransitionMatrix(spec.P), spec.emissions)
    except ModelError as exc:
        raise FitError(f"fitted chain is not ergodic: {exc}") from exc
    return EmResult(params=best.parameter_vector(0), spec=spec, loglik=float(best.loglik[0]),
                    trace=best.traces[0], converged=bool(best.converged[0]), n_iter=int(best.n_iter[0]),
                    flagged=bool(best.flagged[0]), restarts=finals)


# --- statistic maps and studentizers -------------------------------------------------


@dataclass(frozen=True, eq=False)
class StatisticMap:
    """θ = g(s̄) with Jacobian J; ``mode`` is "analytic" or "pilot".

    In pilot mode g is the linearisation ``theta0 + J (s̄ - mean0)`` fitted by
    regression on naive bootstrap replicates.
    """

    func: Callable[[np.ndarray], np.ndarray] | None
    jacobian: Callable[[np.ndarray], np.ndarray] | np.ndarray | None
    mode: str = "analytic"
    feature_map: Callable[[np.ndarray], np.ndarray] | None = None
    theta0: np.ndarray | None = None
    mean0: np.ndarray | None = None
    pilot_stderr: np.ndarray | None = None
    pilot_cov: np.ndarray | None = None  # sample covariance of the pilot θ̂*

    def jac_at(self, s) -> np.ndarray:
        if self.jacobian is None:
            raise ValueError("statistic map has no fitted Jacobian (run the pilot first)")
        return np.atleast_2d(self.jacobian(s) if callable(self.jacobian) else self.jacobian)


def identity_map(dim: int) -> StatisticMap:
    return linear_map(np.eye(dim))


def linear_map(A) -> StatisticMap:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return StatisticMap(func=lambda s: A @ np.asarray(s, dtype=float), jacobian=A)


def statistic_eval(smap: StatisticMap, s_bar) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_1d(np.asarray(s_bar, dtype=float))
    if smap.mode == "pilot":
        if smap.jacobian is None or smap.theta0 is None:
            raise ValueError("pilot-mode statistic map has not been fitted")
        J = smap.jac_at(s)
        return smap.theta0 + J @ (s - smap.mean0), J
    return np.asarray(smap.func(s), dtype=float), smap.jac_at(s)


def pilot_jacobian(spec: HmmSpec, statistic: Callable[[np.ndarray], np.ndarray], n: int, B0: int,
                   rng: np.random.Generator, feature_map: Callable | None = None,
                   theta0=None) -> StatisticMap:
    """Estimate J by least squares of θ̂* on feature means over B0 naive replicates.

    ``statistic`` maps a batch of observation arrays (B0, n, obs_dim) to (B0, κ).
    """
    feats = feature_map or spec.features
    _, obs = simulate_batch(spec, n, B0, rng)
    theta = np.atleast_2d(np.asarray(statistic(obs), dtype=float))
    if theta.shape[0] != B0:
        theta = theta.T
    kappa = theta.shape[1]
    if B0 < 50 * kappa:
        raise ValueError(f"pilot size B0={B0} is below 50*kappa={50 * kappa}")
    fbar = feats(obs).mean(axis=1)
    X = fbar - fbar.mean(axis=0)
    Y = theta - theta.mean(axis=0)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("pilot regression is rank deficient; use a richer feature map")
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    J = coef.T
    resid = Y - X @ coef
    dof = max(B0 - X.shape[1], 1)
    s2 = (resid**2).sum(axis=0) / dof
    xtx_inv = np.linalg.inv(X.T @ X)
    se = np.sqrt(np.outer(s2, np.diag(xtx_inv)))
    mom = chain_moments(spec)
    t0 = theta.mean(axis=0) if theta0 is None else np.asarray(theta0, dtype=float)
    return StatisticMap(func=None, jacobian=J, mode="pilot", feature_map=feats, theta0=t0,
                        mean0=mom.mean, pilot_stderr=se, pilot_cov=np.atleast_2d(np.cov(theta.T)))


@dataclass(frozen=True, eq=False)
class Studentizer:
    V: np.ndarray
    inv_sqrt: np.ndarray
    sqrt: np.ndarray

    @classmethod
    def from_matrix(cls, V) -> "Studentizer":
        V = np.atleast_2d(np.asarray(V, dtype=float))
        V = 0.5 * (V + V.T)
        w, U = np.linalg.eigh(V)
        bad = w <= 1e-12 * max(np.abs(w).max(), 1e-300)
        if bad.any():
            raise NotPositiveDefiniteError(f"matrix is not positive definite: eigenvalue {w[bad][0]:.6g}")
        return cls(V=V, inv_sqrt=(U / np.sqrt(w)) @ U.T, sqrt=(U * np.sqrt(w)) @ U.T)


def inv_sqrt_batch(V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric inverse square roots of a stack of matrices and an SPD mask."""
    V = 0.5 * (V + np.swapaxes(V, -1, -2))
    w, U = np.linalg.eigh(V)
    ok = np.all(w > 1e-12 * np.maximum(np.abs(w).max(axis=-1, keepdims=True), 1e-300), axis=-1) & np.all(np.isfinite(w), axis=-1)
    ws = np.where(w > 0, w, 1.0)
    out = (U / np.sqrt(ws)[..., None, :]) @ np.swapaxes(U, -1, -2)
    return out, ok


def studentize(spec: HmmSpec, smap: StatisticMap, sigma: np.ndarray | None = None) -> Studentizer:
    """V = J Σ̂ Jᵀ at the stationary mean of ``spec``."""
    if sigma is None:
        sigma = spec_covariance(spec).sigma
    w = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        raise NotPositiveDefiniteError(f"asymptotic covariance is not positive definite: eigenvalue {w.min():.6g}")
    mu = chain_moments(spec).mean
    _, J = statistic_eval(smap, mu)
    return Studentizer.from_matrix(J @ sigma @ J.T)
