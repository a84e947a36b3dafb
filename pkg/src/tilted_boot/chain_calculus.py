"""Markov random walk calculus for finite hidden Markov models.

Per-state moments, the Poisson equation ``(I - P) Δ = P Γ``, the asymptotic
covariance of ``S_n / sqrt(n)``, a simulation oracle for it, and the twisting
transform built from the Perron eigenpair of ``P diag(mgf_j(ϑ))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import HmmSpec, TransitionMatrix, simulate_states, sample_emissions, stationary_distribution


class SolvabilityError(ValueError):
    """Right-hand side of the Poisson equation is not π-centred."""


@dataclass(frozen=True, eq=False)
class ChainMoments:
    pi: np.ndarray  # (d,)
    means: np.ndarray  # (d, ℓ) per-state feature means
    covs: np.ndarray  # (d, ℓ, ℓ) per-state feature covariances
    mean: np.ndarray  # (ℓ,) stationary mean
    gamma: np.ndarray  # (d, ℓ) centred means μ_j - μ̄


@dataclass(frozen=True, eq=False)
class PoissonSolution:
    delta: np.ndarray  # (d, ℓ)
    residual: float
    normalization: str = "pi-centred"


@dataclass(frozen=True, eq=False)
class AsymptoticCovariance:
    sigma: np.ndarray
    provenance: str = "formula"
    delta: PoissonSolution | None = None
    stderr: np.ndarray | None = None


def chain_moments(spec: HmmSpec) -> ChainMoments:
    pi = spec.pi
    means = np.array([e.mean() for e in spec.emissions])
    covs = np.array([e.cov() for e in spec.emissions])
    mu = pi @ means
    gamma = means - mu
    # remove the O(eps) drift so that π Γ = 0 holds to rounding
    gamma = gamma - pi @ gamma
    return ChainMoments(pi=pi, means=means, covs=covs, mean=mu, gamma=gamma)


def _as_matrix(P) -> np.ndarray:
    return P.p if isinstance(P, TransitionMatrix) else np.asarray(P, dtype=float)


def solve_poisson(P, gamma, pi: np.ndarray | None = None, tol: float = 1e-8) -> PoissonSolution:
    """Solve (I - P) Δ = P Γ with the normalisation π Δ = 0."""
    p = _as_matrix(P)
    gamma = np.asarray(gamma, dtype=float)
    squeeze = gamma.ndim == 1
    g = gamma[:, None] if squeeze else gamma
    d = p.shape[0]
    if pi is None:
        pi = stationary_distribution(p)
    drift = pi @ g
    if np.max(np.abs(drift), initial=0.0) > tol:
        raise SolvabilityError(f"π Γ must vanish for the Poisson equation to be solvable; got {drift}")
    rhs = p @ g
    # (I - P + 1 π) is invertible for an ergodic chain; its solution satisfies π Δ = π P Γ = 0
    a = np.eye(d) - p + np.outer(np.ones(d), pi)
    delta = np.linalg.solve(a, rhs)
    delta = delta - pi @ delta
    res = float(np.max(np.abs((np.eye(d) - p) @ delta - rhs), initial=0.0))
    delta = delta[:, 0] if squeeze else delta
    return PoissonSolution(delta=delta, residual=res)


def poisson_residual(P, gamma, delta) -> float:
    p = _as_matrix(P)
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float).T).T
    delta = np.atleast_2d(np.asarray(delta, dtype=float).T).T
    return float(np.max(np.abs((np.eye(p.shape[0]) - p) @ delta - p @ gamma), initial=0.0))


def asymptotic_covariance(moments: ChainMoments, P, delta: PoissonSolution | np.ndarray) -> AsymptoticCovariance:
    """Σ = Σ_i π_i Cov_i(Y) + Σ_{i,j} π_i p_ij v_ij v_ijᵀ with v_ij = γ_j - δ_i + δ_j."""
    p = _as_matrix(P)
    dl = delta.delta if isinstance(delta, PoissonSolution) else np.asarray(delta, dtype=float)
    pi = moments.pi
    within = np.einsum("i,ikl->kl", pi, moments.covs)
    v = moments.gamma[None, :, :] - dl[:, None, :] + dl[None, :, :]  # (i, j, ℓ)
    w = pi[:, None] * p
    between = np.einsum("ij,ijk,ijl->kl", w, v, v)
    sigma = within + between
    sigma = 0.5 * (sigma + sigma.T)
    return AsymptoticCovariance(sigma=sigma, provenance="formula",
                                delta=delta if isinstance(delta, PoissonSolution) else None)


def spec_covariance(spec: HmmSpec) -> AsymptoticCovariance:
    """Convenience: moments -> Poisson solution -> asymptotic covariance."""
    mom = chain_moments(spec)
    sol = solve_poisson(spec.P, mom.gamma, pi=mom.pi)
    return asymptotic_covariance(mom, spec.P, sol)


def asymptotic_covariance_batch(P: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Vectorised Σ for a stack of models.

    P: (B, d, d); means: (B, d, ℓ); covs: (B, d, ℓ, ℓ).
    """
    B, d, _ = P.shape
    eye = np.eye(d)
    a = np.concatenate([np.swapaxes(eye - P, 1, 2), np.ones((B, 1, d))], axis=1)
    rhs = np.zeros((B, d + 1))
    rhs[:, -1] = 1.0
    # normal equations on the bordered system; d is tiny
    ata = np.swapaxes(a, 1, 2) @ a
    pi = np.linalg.solve(ata, (np.swapaxes(a, 1, 2) @ rhs[..., None]))[..., 0]
    pi = pi / pi.sum(axis=1, keepdims=True)
    mu = np.einsum("bi,bil->bl", pi, means)
    gamma = means - mu[:, None, :]
    fund = eye - P + pi[:, None, :]
    delta = np.linalg.solve(fund, P @ gamma)
    delta = delta - np.einsum("bi,bil->bl", pi, delta)[:, None, :]
    within = np.einsum("bi,bikl->bkl", pi, covs)
    v = gamma[:, None, :, :] - delta[:, :, None, :] + delta[:, None, :, :]
    w = pi[:, :, None] * P
    between = np.einsum("bij,bijk,bijl->bkl", w, v, v)
    sigma = within + between
    return 0.5 * (sigma + np.swapaxes(sigma, 1, 2))


def empirical_covariance_oracle(spec: HmmSpec, n: int, reps: int, rng: np.random.Generator,
                                chunk: int = 10) -> AsymptoticCovariance:
    """Sample covariance of (S_n - n μ̄)/sqrt(n) over independent stationary paths."""
    if n < 1 or reps < 2:
        raise ValueError("need n >= 1 and reps >= 2")
    mom = chain_moments(spec)
    z = np.empty((reps, spec.dim))
    done = 0
    while done < reps:
        k = min(chunk, reps - done)
        states = simulate_states(spec.P, n, k, mom.pi, rng)
        obs = sample_emissions(spec.emissions, states, rng)
        s = spec.features(obs).sum(axis=1)
        z[done:done + k] = (s - n * mom.mean) / np.sqrt(n)
        done += k
    sigma = np.cov(z, rowvar=False, ddof=1).reshape(spec.dim, spec.dim)
    # standard error of each entry of a sample covariance (Gaussian approximation)
    diag = np.diag(sigma)
    se = np.sqrt((sigma**2 + np.outer(diag, diag)) / (reps - 1))
    return AsymptoticCovariance(sigma=sigma, provenance="empirical", stderr=se)


# --- twisting transform -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class TwistingTransform:
    theta: np.ndarray
    log_eigenvalue: float
    r: np.ndarray
    transition: TransitionMatrix
    emissions: tuple = field(default=())


def perron_pair(m: np.ndarray, tol: float = 1e-14, max_iter: int = 10_000) -> tuple[float, np.ndarray]:
    """Dominant eigenvalue and positive right eigenvector of a nonnegative irreducible matrix.

    Power iteration on ``(M + I)/2`` (same eigenvectors, primitive even when M
    is only irreducible); falls back to a dense eigensolve if it stalls.
    """
    d = m.shape[0]
    scale = m.sum(axis=1).max()
    a = 0.5 * (m / scale + np.eye(d))
    v = np.ones(d) / d
    for _ in range(max_iter):
        w = a @ v
        w /= w.sum()
        if np.max(np.abs(w - v)) < tol:
            v = w
            break
        v = w
    else:
        vals, vecs = np.linalg.eig(m)
        k = int(np.argmax(vals.real))
        v = np.abs(vecs[:, k].real)
    lam = float((m @ v).sum() / v.sum())
    if np.any(v <= 0):
        raise ValueError("Perron eigenvector is not strictly positive")
    return lam, v


def twist_kernel(spec: HmmSpec, theta) -> TwistingTransform:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if not np.any(theta):
        return TwistingTransform(theta=theta, log_eigenvalue=0.0, r=np.ones(spec.d),
                                 transition=spec.transition, emissions=tuple(spec.emissions))
    log_m = np.array([e.log_mgf(theta) for e in spec.emissions])
    shift = log_m.max()
    m = spec.P * np.exp(log_m - shift)[None, :]
    lam, r = perron_pair(m)
    pi = spec.pi
    r = r / (pi @ r)
    log_lam = float(np.log(lam) + shift)
    pt = m * r[None, :] / (lam * r[:, None])
    pt = pt / pt.sum(axis=1, keepdims=True)
    twisted = tuple(e.exponential_tilt(theta) for e in spec.emissions)
    return TwistingTransform(theta=theta, log_eigenvalue=log_lam, r=r,
                             transition=TransitionMatrix(pt, check_ergodic=False), emissions=twisted)


def log_eigenvalue(spec: HmmSpec, theta) -> float:
    return twist_kernel(spec, theta).log_eigenvalue


def _step(scale: float) -> float:
    return 1e-3 * (1.0 + abs(scale))


def lambda_gradient(spec: HmmSpec, h: float | None = None) -> np.ndarray:
    """∇Λ(0) by central differences with one Richardson extrapolation."""
    ell = spec.dim
    h = _step(0.0) if h is None else h
    g = np.empty(ell)
    for k in range(ell):
        e = np.zeros(ell)
        e[k] = 1.0

        def cd(hh):
            return (log_eigenvalue(spec, hh * e) - log_eigenvalue(spec, -hh * e)) / (2 * hh)

        g[k] = (4 * cd(h / 2) - cd(h)) / 3
    return g


def lambda_hessian(spec: HmmSpec, h: float | None = None) -> np.ndarray:
    """Hessian of Λ at 0 by central differences with one Richardson extrapolation."""
    ell = spec.dim
    h = _step(0.0) if h is None else h
    lam0 = log_eigenvalue(spec, np.zeros(ell))

    def hess(hh):
        out = np.empty((ell, ell))
        for k in range(ell):
            for l in range(k, ell):
                ek = np.zeros(ell)
                el = np.zeros(ell)
                ek[k] = hh
                el[l] = hh
                if k == l:
                    val = (log_eigenvalue(spec, ek) - 2 * lam0 + log_eigenvalue(spec, -ek)) / hh**2
                else:
                    val = (log_eigenvalue(spec, ek + el) - log_eigenvalue(spec, ek - el)
                           - log_eigenvalue(spec, el - ek) + log_eigenvalue(spec, -ek - el)) / (4 * hh**2)
                out[k, l] = out[l, k] = val
        return out

    return (4 * hess(h / 2) - hess(h)) / 3


@dataclass(frozen=True, eq=False)
class EigenDerivativeReport:
    derivative: np.ndarray  # (d, ℓ) ∂r/∂ϑ at 0
    poisson: np.ndarray  # (d, ℓ) solution it is compared with
    max_difference_error: float
    passed: bool


def eigen_derivative_check(spec: HmmSpec, tol: float = 1e-4, h: float | None = None) -> EigenDerivativeReport:
    """Compare ∂r(·;ϑ)/∂ϑ at 0 with the Poisson solution for E_x Y_1 - μ̄.

    E_x Y_1 - μ̄ = (P γ)_x, so the reference solves (I - P) g = P γ. Only
    differences g_i - g_j are compared (the eigenfunction's gauge is free).
    """
    ell = spec.dim
    h = _step(0.0) if h is None else h
    mom = chain_moments(spec)
    d = spec.d
    deriv = np.empty((d, ell))
    for k in range(ell):
        e = np.zeros(ell)
        e[k] = 1.0

        def cd(hh):
            return (twist_kernel(spec, hh * e).r - twist_kernel(spec, -hh * e).r) / (2 * hh)

        deriv[:, k] = (4 * cd(h / 2) - cd(h)) / 3
    ref = solve_poisson(spec.P, mom.gamma, pi=mom.pi).delta
    dd = deriv[:, None, :] - deriv[None, :, :]
    dr = ref[:, None, :] - ref[None, :, :]
    err = float(np.max(np.abs(dd - dr), initial=0.0))
    return EigenDerivativeReport(derivative=deriv, poisson=ref, max_difference_error=err, passed=err <= tol)


@dataclass(frozen=True, eq=False)
class LanReport:
    mean: float
    variance: float
    mean_se: float
    variance_se: float
    expected_mean: float
    expected_variance: float
    samples: np.ndarray


def lan_diagnostic(spec: HmmSpec, eta, n: int, reps: int, rng: np.random.Generator,
                   sigma: np.ndarray | None = None, chunk: int = 100) -> LanReport:
    """Simulate under P and record log(dQ_n^η/dP) for the twist at ϑ = η/√n.

    log dQ/dP = ϑ·(S_n - n μ̄) - n(Λ(ϑ) - ϑ·μ̄) + log r(X_n) - log r(X_0).
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    theta = eta / np.sqrt(n)
    mom = chain_moments(spec)
    tw = twist_kernel(spec, theta)
    if sigma is None:
        sigma = spec_covariance(spec).sigma
    centred_lam = tw.log_eigenvalue - theta @ mom.mean
    log_r = np.log(tw.r)
    out = np.empty(reps)
    done = 0
    while done < reps:
        k = min(chunk, reps - done)
        states = simulate_states(spec.P, n, k, mom.pi, rng)
        obs = sample_emissions(spec.emissions, states, rng)
        s = spec.features(obs).sum(axis=1)
        out[done:done + k] = ((s - n * mom.mean) @ theta - n * centred_lam
                              + log_r[states[:, -1]] - log_r[states[:, 0]])
        done += k
    var = float(out.var(ddof=1))
    m4 = float(np.mean((out - out.mean()) ** 4))
    return LanReport(mean=float(out.mean()), variance=var,
                     mean_se=float(np.sqrt(var / reps)),
                     variance_se=float(np.sqrt(max(m4 - var**2, 0.0) / reps)),
                     expected_mean=float(-0.5 * eta @ sigma @ eta),
                     expected_variance=float(eta @ sigma @ eta),
                     samples=out)
