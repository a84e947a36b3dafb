"""Per-state emission families with closed-form exponential tilts.

Each family exposes the additive feature ``features(y)`` it contributes to the
Markov random walk, its density, sampler, moment generating function of the
feature, and an exact conjugate tilt ``h(y) ∝ exp(t·features(y)) f(y)``.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln


class DomainError(ValueError):
    """Observation outside the support of an emission family."""


class Emission(ABC):
    family: str
    dim: int
    obs_dim: int

    @abstractmethod
    def features(self, y: np.ndarray) -> np.ndarray:
        """Map observations of shape (..., obs_dim) to features (..., dim)."""

    @abstractmethod
    def log_density(self, y) -> np.ndarray | float: ...

    @abstractmethod
    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray: ...

    @abstractmethod
    def mean(self) -> np.ndarray: ...

    @abstractmethod
    def cov(self) -> np.ndarray: ...

    @abstractmethod
    def log_mgf(self, t) -> float: ...

    @abstractmethod
    def exponential_tilt(self, t) -> "Emission": ...

    def mgf(self, t) -> float:
        return float(np.exp(self.log_mgf(t)))

    def _as_t(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if t.shape != (self.dim,):
            raise ValueError(f"tilt vector must have shape ({self.dim},), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("tilt vector must be finite")
        return t


class Gaussian(Emission):
    """Multivariate normal; the feature is the observation itself."""

    family = "gaussian"

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        object.__setattr__(self, "mean_", mean)
        object.__setattr__(self, "cov_", 0.5 * (cov + cov.T))
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean_.size

    @property
    def obs_dim(self) -> int:
        return self.mean_.size

    def features(self, y):
        return np.asarray(y, dtype=float)

    def log_density(self, y):
        y = np.asarray(y, dtype=float)
        diff = y - self.mean_
        z = np.linalg.solve(self._chol, diff[..., None])[..., 0] if diff.ndim > 1 else np.linalg.solve(self._chol, diff)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (self.dim * np.log(2 * np.pi) + logdet + np.sum(z * z, axis=-1))

    def sample(self, rng, size=None):
        n = 1 if size is None else int(size)
        z = rng.standard_normal((n, self.dim))
        out = self.mean_ + z @ self._chol.T
        return out[0] if size is None else out

    def mean(self):
        return self.mean_.copy()

    def cov(self):
        return self.cov_.copy()

    def log_mgf(self, t):
        t = self._as_t(t)
        return float(t @ self.mean_ + 0.5 * t @ self.cov_ @ t)

    def exponential_tilt(self, t):
        t = self._as_t(t)
        return Gaussian(self.mean_ + self.cov_ @ t, self.cov_)

    def __repr__(self):
        return f"Gaussian(mean={self.mean_.tolist()}, cov={self.cov_.tolist()})"


def _check_counts(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y != np.floor(y)) or not np.all(np.isfinite(y)):
        raise DomainError("count observations must be nonnegative integers")
    return y


@dataclass(frozen=True, eq=False)
class Poisson(Emission):
    rate: float

    family = "poisson"
    dim = 1
    obs_dim = 1

    def __post_init__(self):
        if not (np.isfinite(self.rate) and self.rate > 0):
            raise ValueError(f"Poisson rate must be positive, got {self.rate}")
        object.__setattr__(self, "rate", float(self.rate))

    def features(self, y):
        return np.asarray(y, dtype=float)

    def log_density(self, y):
        y = _check_counts(y)
        val = y * np.log(self.rate) - self.rate - gammaln(y + 1.0)
        # scalar-per-observation: collapse the trailing obs axis of size 1
        if val.ndim >= 1 and val.shape[-1] == 1:
            val = val[..., 0]
        return val if val.ndim else float(val)

    def sample(self, rng, size=None):
        n = 1 if size is None else int(size)
        out = rng.poisson(self.rate, size=(n, 1)).astype(float)
        return out[0] if size is None else out

    def mean(self):
        return np.array([self.rate])

    def cov(self):
        return np.array([[self.rate]])

    def log_mgf(self, t):
        t = self._as_t(t)
        return float(self.rate * np.expm1(t[0]))

    def exponential_tilt(self, t):
        t = self._as_t(t)
        return Poisson(self.rate * np.exp(t[0]))


@dataclass(frozen=True, eq=False)
class ZeroModifiedPoisson(Emission):
    """Counts with additive feature ``(y, 1{y=0})``.

    The pmf is ``Pois(y; rate) * exp(zero_shift * 1{y=0}) / Z``. With
    ``zero_shift=0`` this is the ordinary Poisson law; the extra coordinate lets
    the zero-frequency enter the random walk, and the family stays closed under
    tilting in both feature coordinates.
    """

    rate: float
    zero_shift: float = 0.0

    family = "poisson"
    dim = 2
    obs_dim = 1

    def __post_init__(self):
        if not (np.isfinite(self.rate) and self.rate > 0):
            raise ValueError(f"Poisson rate must be positive, got {self.rate}")
        if not np.isfinite(self.zero_shift):
            raise ValueError("zero_shift must be finite")
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "zero_shift", float(self.zero_shift))

    @property
    def _log_z(self) -> float:
        # log(1 + e^{-rate}(e^{s} - 1))
        return float(np.log1p(np.exp(-self.rate) * np.expm1(self.zero_shift)))

    @property
    def p_zero(self) -> float:
        return float(np.exp(-self.rate + self.zero_shift - self._log_z))

    def features(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim and y.shape[-1] == 1:
            y = y[..., 0]
        return np.stack([y, (y == 0).astype(float)], axis=-1)

    def log_density(self, y):
        y = _check_counts(y)
        if y.ndim >= 1 and y.shape[-1] == 1:
            y = y[..., 0]
        val = y * np.log(self.rate) - self.rate - gammaln(y + 1.0) + self.zero_shift * (y == 0) - self._log_z
        return val if np.ndim(val) else float(val)

    def sample(self, rng, size=None):
        n = 1 if size is None else int(size)
        u = rng.random(n)
        v = rng.random(n)
        f0 = np.exp(-self.rate)
        # positive part: inverse cdf of the zero-truncated Poisson
        pos = stats.poisson.ppf(f0 + v * (1.0 - f0), self.rate)
        pos = np.maximum(pos, 1.0)
        out = np.where(u < self.p_zero, 0.0, pos)[:, None]
        return out[0] if size is None else out

    def mean(self):
        z = np.exp(self._log_z)
        return np.array([self.rate / z, self.p_zero])

    def cov(self):
        z = np.exp(self._log_z)
        m1 = self.rate / z
        p0 = self.p_zero
        v11 = (self.rate + self.rate**2) / z - m1**2
        return np.array([[v11, -m1 * p0], [-m1 * p0, p0 * (1.0 - p0)]])

    def log_mgf(self, t):
        t = self._as_t(t)
        num = -self.rate + np.log(np.exp(self.zero_shift + t[1]) + np.expm1(self.rate * np.exp(t[0])))
        return float(num - self._log_z)

    def exponential_tilt(self, t):
        t = self._as_t(t)
        return ZeroModifiedPoisson(self.rate * np.exp(t[0]), self.zero_shift + t[1])


def log_density(e: Emission, y):
    return e.log_density(y)


def mgf(e: Emission, t) -> float:
    return e.mgf(t)


def exponential_tilt(e: Emission, t) -> Emission:
    return e.exponential_tilt(t)
