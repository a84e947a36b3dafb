"""Regions, strata, the conditional-normal fixed point and the tilted kernel."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats
from scipy.special import log_ndtr, ndtr

from .chain_calculus import PoissonSolution
from .inference import Studentizer
from .model import HmmSpec, Path, TransitionMatrix

SHAPES = ("square", "circle")


class TiltError(RuntimeError):
    pass


def _rotation(k: int) -> np.ndarray:
    """Orthogonal map taking the top direction (0, 1) to the direction of stratum k."""
    a = k * np.pi / 2
    c, s = round(np.cos(a)), round(np.sin(a))
    # columns: image of e1, image of e2 = (sin a, cos a)
    return np.array([[c, s], [-s, c]], dtype=float)


def stratum_direction(k: int) -> np.ndarray:
    return _rotation(k) @ np.array([0.0, 1.0])


# --- sets -----------------------------------------------------------------------


@dataclass(frozen=True)
class WholeSpace:
    dim: int = 2


@dataclass(frozen=True)
class HalfPlane:
    """{u : direction·u ≥ level} with a unit ``direction``."""

    direction: tuple
    level: float


@dataclass(frozen=True)
class ConeStratum:
    """Part of the complement of ``c·A`` whose exit direction is stratum ``k``.

    k=0: u2 ≥ |u1|, u2 > 0; k=1: u1 > |u2|; k=2: -u2 ≥ |u1|; k=3: -u1 > |u2|.
    """

    shape: str
    c: float
    k: int


@dataclass(frozen=True)
class Region:
    shape: str
    c: float
    nominal: float | None = None
    strata: tuple = field(default=())

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if not self.c > 0:
            raise ValueError("region scale must be positive")
        if not self.strata:
            object.__setattr__(self, "strata", tuple(ConeStratum(self.shape, self.c, k) for k in range(4)))

    def exit_scale(self, T) -> np.ndarray:
        return exit_scale(self.shape, T)

    def contains(self, T, c: float | None = None) -> np.ndarray:
        return self.exit_scale(T) <= (self.c if c is None else c)

    def with_scale(self, c: float) -> "Region":
        return Region(self.shape, float(c), None)


def exit_scale(shape: str, T) -> np.ndarray:
    """Smallest c with T on or inside c·A (max-norm for squares, Euclidean for circles)."""
    T = np.asarray(T, dtype=float)
    if shape == "square":
        return np.abs(T).max(axis=-1)
    if shape == "circle":
        return np.sqrt((T * T).sum(axis=-1))
    raise ValueError(f"unknown shape {shape!r}")


def stratum_index(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    u1, u2 = T[..., 0], T[..., 1]
    vert = np.abs(u2) >= np.abs(u1)
    return np.where(vert, np.where(u2 > 0, 0, 2), np.where(u1 > 0, 1, 3))


def make_region(shape: str, nominal: float) -> Region:
    if not 0 < nominal < 1:
        raise ValueError("nominal level must lie in (0, 1)")
    if shape == "square":
        c = stats.norm.ppf((1 + np.sqrt(nominal)) / 2)
    elif shape == "circle":
        c = np.sqrt(stats.chi2.ppf(nominal, 2))
    else:
        raise ValueError(f"shape must be one of {SHAPES}")
    return Region(shape, float(c), nominal)


def region_boundary(shape: str, c: float, npts: int = 200) -> np.ndarray:
    """Closed polygon of the boundary of c·A in standardized coordinates, (npts+1, 2)."""
    if shape == "circle":
        a = np.linspace(0, 2 * np.pi, npts + 1)
        return c * np.column_stack([np.cos(a), np.sin(a)])
    return c * np.array([[1, 1], [-1, 1], [-1, -1], [1, -1], [1, 1]], dtype=float)


# --- conditional normal means ---------------------------------------------------------


def _mills(z: float) -> float:
    return float(np.exp(stats.norm.logpdf(z) - log_ndtr(-z)))


def _top_cone_moments(shape: str, c: float, s: np.ndarray) -> tuple[float, np.ndarray]:
    """Scaled mass and conditional mean of N restricted to {N - s ∈ top cone stratum}."""
    s1, s2 = float(s[0]), float(s[1])
    lo = c if shape == "square" else c / np.sqrt(2.0)
    z0 = lo + s2

    def inner(u2):
        # returns (∫φ(v1), ∫v1 φ(v1)) over the allowed u1 range at height u2
        if shape == "square" or u2 >= c:
            segs = [(-u2, u2)]
        else:
            w = np.sqrt(c * c - u2 * u2)
            segs = [(-u2, -w), (w, u2)]
        i0 = i1 = 0.0
        for a, b in segs:
            a, b = a + s1, b + s1
            i0 += ndtr(b) - ndtr(a)
            i1 += stats.norm.pdf(a) - stats.norm.pdf(b)
        return i0, i1

    def integrand(t):
        u2 = lo + t
        i0, i1 = inner(u2)
        # φ(u2 + s2) / φ(z0) keeps far-tail strata away from underflow
        w = np.exp(-0.5 * t * t - t * z0)
        return w * np.array([i0, i1, (u2 + s2) * i0])

    brk = [max(c - lo, 0.0)] if shape == "circle" else []
    span = 40.0 + abs(z0)
    edges = [0.0] + [b for b in brk if 0 < b < span] + [span]
    m0 = m1 = m2 = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        v, _ = integrate.quad_vec(integrand, a, b, epsabs=0.0, epsrel=1e-10, limit=400)
        m0, m1, m2 = m0 + v[0], m1 + v[1], m2 + v[2]
    if not m0 > 0:
        raise TiltError("stratum has vanishing probability at this shift")
    return m0, np.array([m1 / m0, m2 / m0])


def conditional_normal_mean(A, shift) -> np.ndarray:
    """E[N | N ∈ A + shift] for a standard normal N."""
    s = np.asarray(shift, dtype=float)
    if isinstance(A, WholeSpace):
        return np.zeros_like(s)
    if isinstance(A, HalfPlane):
        a = np.asarray(A.direction, dtype=float)
        a = a / np.linalg.norm(a)
        z = A.level + a @ s
        if log_ndtr(-z) < np.log(1e-300):
            raise TiltError("half-plane has vanishing probability at this shift")
        return a * _mills(z)
    if isinstance(A, ConeStratum):
        R = _rotation(A.k)
        _, m = _top_cone_moments(A.shape, A.c, R.T @ s)
        return R @ m
    raise TypeError(f"unsupported set {type(A).__name__}")


def stratum_probability(A: ConeStratum, shift) -> float:
    """P(N ∈ A + shift); used by diagnostics and tests."""
    R = _rotation(A.k)
    s = R.T @ np.asarray(shift, dtype=float)
    m0, _ = _top_cone_moments(A.shape, A.c, s)
    lo = A.c if A.shape == "square" else A.c / np.sqrt(2.0)
    return float(m0 * stats.norm.pdf(lo + s[1]))


# --- fixed point ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TiltSolution:
    sigma_bar: np.ndarray
    iterations: int
    residual: float
    trace: tuple = ()

    @property
    def sigma_l(self) -> float:
        return float(np.linalg.norm(self.sigma_bar))

    @property
    def r(self) -> float:
        return self.sigma_l


TILT_TARGETS = ("tangent", "cone")


def tilt_target(region: Region, k: int, target: str = "tangent"):
    """Set whose conditional mean drives the tilt of stratum ``k``.

    "cone" uses the stratum itself. "tangent" uses the half-plane beyond the
    supporting line of c·A at the exit point c·d_k; for squares the two agree
    to about 1e-3, while for circles the cone's diagonal corners pull the
    cone fixed point inside the region.
    """
    if target == "cone":
        return region.strata[k]
    if target == "tangent":
        return HalfPlane(tuple(stratum_direction(k)), region.c)
    raise ValueError(f"tilt target must be one of {TILT_TARGETS}")


def fixed_point_tilt(A, stratum: int = 0, start=None, tol: float = 1e-5, max_iter: int = 200,
                     target: str = "cone") -> TiltSolution:
    """Iterate x ← ½E[N | N ∈ A_k + x] from the large-deviations point."""
    if isinstance(A, Region):
        A = tilt_target(A, stratum, target)
    if start is None:
        if isinstance(A, ConeStratum):
            start = A.c * stratum_direction(A.k)
        elif isinstance(A, HalfPlane):
            a = np.asarray(A.direction, dtype=float)
            start = A.level * a / np.linalg.norm(a)
        else:
            start = np.zeros(2)
    x = np.asarray(start, dtype=float)
    trace = [x]
    for it in range(1, max_iter + 1):
        nx = 0.5 * conditional_normal_mean(A, x)
        step = float(np.linalg.norm(nx - x))
        x = nx
        trace.append(x)
        if step <= tol:
            res = float(np.linalg.norm(x - 0.5 * conditional_normal_mean(A, x)))
            return TiltSolution(x, it, res, tuple(trace))
    raise TiltError(f"fixed point did not converge in {max_iter} iterations; last iterates {trace[-3:]}")


def solve_strata(region: Region, target: str = "tangent") -> list[TiltSolution]:
    return [fixed_point_tilt(region, k, target=target) for k in range(len(region.strata))]


# --- tilted kernel ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TiltedKernel:
    """Change of measure Q: transition q and per-state tilted emission laws.

    ``t`` is the feature-space tilt; the one-step log weight from i to j with
    feature ψ is ``log_z[i] - t·(ψ - mu_hat - delta[i] + delta[j])``.
    """

    q: np.ndarray
    emissions: tuple
    C: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    mu_hat: np.ndarray
    log_z: np.ndarray
    sigma_bar: np.ndarray

    @property
    def transition(self) -> TransitionMatrix:
        return TransitionMatrix(self.q, check_ergodic=False)


def build_tilted_kernel(spec: HmmSpec, sigma_bar, stud: Studentizer, J, delta, n: int,
                        mu_hat=None) -> TiltedKernel:
    if n < 1:
        raise ValueError("n must be >= 1")
    sigma_bar = np.asarray(sigma_bar, dtype=float)
    J = np.atleast_2d(np.asarray(J, dtype=float))
    D = delta.delta if isinstance(delta, PoissonSolution) else np.asarray(delta, dtype=float)
    D = D.reshape(spec.d, spec.dim)
    if mu_hat is None:
        mu_hat = spec.pi @ np.array([e.mean() for e in spec.emissions])
    mu_hat = np.asarray(mu_hat, dtype=float)
    t = J.T @ stud.inv_sqrt @ sigma_bar / np.sqrt(n)
    log_mgf = np.array([e.log_mgf(t) for e in spec.emissions])
    # log C_ij = log mgf_j(t) + t·(-mu_hat - delta_i + delta_j)
    dt = D @ t
    log_c = log_mgf[None, :] + (-(mu_hat @ t) - dt[:, None] + dt[None, :])
    P = spec.P
    with np.errstate(divide="ignore"):
        lw = np.log(P) + log_c
    top = lw.max(axis=1, keepdims=True)
    log_z = (top + np.log(np.exp(lw - top).sum(axis=1, keepdims=True)))[:, 0]
    q = np.exp(lw - log_z[:, None])
    q /= q.sum(axis=1, keepdims=True)
    ems = tuple(e.exponential_tilt(t) for e in spec.emissions)
    return TiltedKernel(q=q, emissions=ems, C=np.exp(log_c), t=t, delta=D, mu_hat=mu_hat,
                        log_z=log_z, sigma_bar=sigma_bar)


def log_weight(kernel: TiltedKernel, spec: HmmSpec, path: Path) -> float:
    """log dP/dQ of one path, accumulated step by step from the densities."""
    x = np.asarray(path.states)
    y = np.asarray(path.observations, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    total = 0.0
    for s in range(1, len(x)):
        i, j = int(x[s - 1]), int(x[s])
        if kernel.q[i, j] <= 0:
            raise TiltError(f"transition {i}->{j} has zero probability under the tilted kernel")
        f = spec.emissions[j].log_density(y[s - 1])
        h = kernel.emissions[j].log_density(y[s - 1])
        if not np.isfinite(h):
            raise TiltError("observation has zero density under the tilted emission")
        total += np.log(spec.P[i, j]) + f - np.log(kernel.q[i, j]) - h
    return float(total)


def log_weights_batch(kernel: TiltedKernel, states: np.ndarray, feature_sums: np.ndarray) -> np.ndarray:
    """Vectorised log dP/dQ from the state paths and the additive sums S_n."""
    n = states.shape[1] - 1
    lz = kernel.log_z[states[:, :-1]].sum(axis=1)
    dt = kernel.delta @ kernel.t
    return lz - (feature_sums - n * kernel.mu_hat) @ kernel.t + dt[states[:, 0]] - dt[states[:, -1]]


def sample_tilted(spec: HmmSpec, kernel: TiltedKernel, n: int, size: int, rng: np.random.Generator):
    """Paths under Q (stationary start of the untilted chain); returns (states, obs)."""
    from .model import simulate_batch

    return simulate_batch(spec, n, size, rng, transition=kernel.q, emissions=kernel.emissions)
