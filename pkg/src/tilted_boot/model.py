"""Finite-state hidden Markov models viewed as Markov additive processes."""
from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from typing import Sequence

import numba
import numpy as np

from .emissions import Emission


class ModelError(ValueError):
    """Invalid model construction (non-stochastic, reducible, periodic...)."""


def _reachable(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        nxt = []
        for i in frontier:
            for j in np.flatnonzero(adj[i]):
                if not seen[j]:
                    seen[j] = True
                    nxt.append(j)
        frontier = nxt
    return seen


def _period(adj: np.ndarray) -> int:
    # BFS levels from state 0; the period is the gcd of level[i] + 1 - level[j] over edges i->j
    d = adj.shape[0]
    level = np.full(d, -1)
    level[0] = 0
    queue = [0]
    while queue:
        i = queue.pop(0)
        for j in np.flatnonzero(adj[i]):
            if level[j] < 0:
                level[j] = level[i] + 1
                queue.append(j)
    g = 0
    for i in range(d):
        for j in np.flatnonzero(adj[i]):
            g = gcd(g, int(abs(level[i] + 1 - level[j])))
    return g


class TransitionMatrix:
    """Row-stochastic, irreducible and aperiodic transition matrix."""

    def __init__(self, p, *, check_ergodic: bool = True):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] < 1:
            raise ModelError(f"transition matrix must be square with d >= 1, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise ModelError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
            raise ModelError("each row of the transition matrix must sum to 1")
        if check_ergodic:
            adj = p > 0
            if not _reachable(adj, 0).all() or not _reachable(adj.T, 0).all():
                raise ModelError("transition matrix is reducible")
            if _period(adj) != 1:
                raise ModelError("transition matrix is periodic")
        p = p / p.sum(axis=1, keepdims=True)
        p.setflags(write=False)
        self.p = p

    @property
    def d(self) -> int:
        return self.p.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.p if dtype is None else self.p.astype(dtype)

    def __repr__(self):
        return f"TransitionMatrix({self.p.tolist()})"


def stationary_distribution(P) -> np.ndarray:
    """Stationary law of an ergodic chain via a bordered linear solve."""
    p = P.p if isinstance(P, TransitionMatrix) else np.asarray(P, dtype=float)
    d = p.shape[0]
    a = np.vstack([(np.eye(d) - p).T, np.ones(d)])
    b = np.zeros(d + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    # one step of iterative refinement keeps the residual at machine precision
    r = b - a @ pi
    pi = pi + np.linalg.lstsq(a, r, rcond=None)[0]
    if np.any(pi <= 0):
        raise ModelError("chain has no strictly positive stationary distribution")
    return pi / pi.sum()


@dataclass(frozen=True, eq=False)
class HmmSpec:
    """Transition matrix plus one emission law per hidden state."""

    transition: TransitionMatrix
    emissions: tuple[Emission, ...]

    def __post_init__(self):
        tm = self.transition
        if not isinstance(tm, TransitionMatrix):
            tm = TransitionMatrix(tm)
            object.__setattr__(self, "transition", tm)
        ems = tuple(self.emissions)
        object.__setattr__(self, "emissions", ems)
        if len(ems) != tm.d:
            raise ModelError(f"need {tm.d} emission laws, got {len(ems)}")
        if len({(e.dim, e.obs_dim, type(e)) for e in ems}) != 1:
            raise ModelError("all emission laws must share family and dimensions")

    @property
    def d(self) -> int:
        return self.transition.d

    @property
    def P(self) -> np.ndarray:
        return self.transition.p

    @property
    def dim(self) -> int:
        """Dimension of the additive component."""
        return self.emissions[0].dim

    @property
    def obs_dim(self) -> int:
        return self.emissions[0].obs_dim

    @property
    def pi(self) -> np.ndarray:
        return stationary_distribution(self.transition)

    def features(self, y) -> np.ndarray:
        return self.emissions[0].features(y)

    def with_emissions(self, emissions: Sequence[Emission]) -> "HmmSpec":
        return HmmSpec(self.transition, tuple(emissions))


@dataclass(frozen=True, eq=False)
class Path:
    states: np.ndarray  # (n+1,)
    observations: np.ndarray  # (n, obs_dim)

    def __post_init__(self):
        if len(self.observations) != len(self.states) - 1:
            raise ValueError("observations must be one shorter than states")


@numba.njit(cache=True)
def _walk(cum, x0, u):
    B, n = u.shape
    d = cum.shape[0]
    out = np.empty((B, n + 1), dtype=np.int64)
    for b in range(B):
        x = x0[b]
        out[b, 0] = x
        for t in range(n):
            v = u[b, t]
            j = 0
            while j < d - 1 and v >= cum[x, j]:
                j += 1
            x = j
            out[b, t + 1] = x
    return out


def _init_law(spec: HmmSpec, init) -> np.ndarray:
    if init is None:
        return spec.pi
    init = np.asarray(init, dtype=float)
    if init.shape != (spec.d,) or np.any(init < 0) or abs(init.sum() - 1) > 1e-10:
        raise ValueError("init must be a probability vector of length d")
    return init


def simulate_states(P: np.ndarray, n: int, size: int, init: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` independent state paths x_0..x_n; shape (size, n+1)."""
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    c0 = np.cumsum(init)
    c0[-1] = 1.0
    x0 = np.searchsorted(c0, rng.random(size), side="right").astype(np.int64)
    u = rng.random((size, n))
    return _walk(cum, x0, u)


def sample_emissions(emissions: Sequence[Emission], states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Observations for states[..., 1:], drawn state by state in index order."""
    x = states[..., 1:]
    out = np.empty(x.shape + (emissions[0].obs_dim,))
    for j, e in enumerate(emissions):
        mask = x == j
        k = int(mask.sum())
        if k:
            out[mask] = e.sample(rng, k)
    return out


def simulate_batch(spec: HmmSpec, n: int, size: int, rng: np.random.Generator, init=None,
                   transition: np.ndarray | None = None, emissions: Sequence[Emission] | None = None):
    """Vectorised simulation of ``size`` paths; returns (states, observations).

    ``transition``/``emissions`` override the sampling law (used for tilted
    resampling) while the default initial law stays that of ``spec``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    init = _init_law(spec, init)
    p = spec.P if transition is None else np.asarray(transition)
    states = simulate_states(p, n, size, init, rng)
    obs = sample_emissions(spec.emissions if emissions is None else emissions, states, rng)
    return states, obs


def simulate(spec: HmmSpec, n: int, rng: np.random.Generator, init=None) -> Path:
    states, obs = simulate_batch(spec, n, 1, rng, init=init)
    return Path(states[0], obs[0])


def additive_sum(path: Path, spec: HmmSpec | None = None) -> np.ndarray:
    """S_n = sum of the additive features along the path (zero for an empty path)."""
    obs = np.asarray(path.observations, dtype=float)
    feats = obs if spec is None else spec.features(obs)
    if len(feats) == 0:
        dim = spec.dim if spec is not None else (obs.shape[-1] if obs.ndim == 2 else 1)
        return np.zeros(dim)
    return feats.sum(axis=0)
