"""Distributions, seeded random streams and moment estimators."""
from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from scipy import special

# ---------------------------------------------------------------- random streams


def rng_stream(base_seed: int, *task: int) -> np.random.Generator:
    """Independent counter-based generator for ``(base_seed, task...)``.

    The stream depends only on its key, never on the order in which tasks
    are executed, so parallel Monte Carlo stays reproducible.
    """
    seq = np.random.SeedSequence(int(base_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(t) for t in task))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class RngSeedPolicy:
    base_seed: int = 0

    def stream(self, *task: int) -> np.random.Generator:
        return rng_stream(self.base_seed, *task)


# ---------------------------------------------------------------- distributions


@dataclass(frozen=True)
class Normal:
    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def sample(self, rng, size=None):
        return self.mu + self.sigma * rng.standard_normal(size)

    def mean(self):
        return self.mu

    def var(self):
        return self.sigma**2


@dataclass(frozen=True)
class UniformSym:
    """Uniform on ``[-half_width, half_width]``."""

    half_width: float

    def __post_init__(self):
        if self.half_width < 0:
            raise ValueError("half_width must be non-negative")

    def sample(self, rng, size=None):
        return rng.uniform(-self.half_width, self.half_width, size)

    def mean(self):
        return 0.0

    def var(self):
        return self.half_width**2 / 3.0


@dataclass(frozen=True)
class LogNormal:
    mu_ln: float
    sigma_ln: float
    unit: float = 1.0

    def __post_init__(self):
        if self.sigma_ln < 0:
            raise ValueError("sigma_ln must be non-negative")

    def sample(self, rng, size=None):
        return self.unit * np.exp(self.mu_ln + self.sigma_ln * rng.standard_normal(size))

    def mean(self):
        return self.unit * math.exp(self.mu_ln + 0.5 * self.sigma_ln**2)

    def var(self):
        s2 = self.sigma_ln**2
        return self.unit**2 * math.expm1(s2) * math.exp(2 * self.mu_ln + s2)


@dataclass(frozen=True)
class Beta:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")

    def sample(self, rng, size=None):
        return rng.beta(self.alpha, self.beta, size)

    def mean(self):
        return self.alpha / (self.alpha + self.beta)

    def var(self):
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s**2 * (s + 1.0))


@dataclass(frozen=True)
class Empirical:
    sample_values: np.ndarray

    def __post_init__(self):
        if np.asarray(self.sample_values).shape[0] == 0:
            raise ValueError("empirical sample must not be empty")

    def sample(self, rng, size=None):
        values = np.asarray(self.sample_values)
        idx = rng.integers(0, values.shape[0], size)
        return values[idx]

    def mean(self):
        return np.mean(self.sample_values, axis=0)

    def var(self):
        return np.var(self.sample_values, axis=0, ddof=1)


@dataclass(frozen=True)
class MultivariateNormal:
    mean_vec: np.ndarray
    cov: np.ndarray

    def sample(self, rng, size=None):
        return mvn_sample(self.mean_vec, self.cov, rng, size)

    def mean(self):
        return np.asarray(self.mean_vec, dtype=float)

    def var(self):
        return np.diag(np.asarray(self.cov, dtype=float))


def lognormal_from_moments(mu: float, sigma: float, unit: float = 1.0) -> LogNormal:
    """Log-normal distribution with mean ``mu`` and standard deviation ``sigma``.

    ``unit`` only makes the logarithm argument dimensionless.
    """
    if not mu > 0:
        raise ValueError(f"log-normal mean must be positive, got {mu}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    s2 = math.log1p((sigma / mu) ** 2)
    return LogNormal(mu_ln=math.log(mu / unit) - 0.5 * s2, sigma_ln=math.sqrt(s2), unit=unit)


def beta_from_moments(mu: float, sigma: float) -> Beta:
    if not 0 < mu < 1:
        raise ValueError(f"beta mean must lie in (0, 1), got {mu}")
    if not 0 < sigma**2 < mu * (1 - mu):
        raise ValueError("variance too large for a beta distribution on [0, 1]")
    common = mu * (1 - mu) / sigma**2 - 1.0
    return Beta(alpha=common * mu, beta=common * (1 - mu))


# ---------------------------------------------------------------- critical values


def normal_critical(level: float) -> float:
    """Two-sided critical value of the standard normal distribution."""
    return NormalDist().inv_cdf(0.5 * (1.0 + level))


def student_t_cdf(t, dof):
    t = np.asarray(t, dtype=float)
    tail = 0.5 * special.betainc(0.5 * dof, 0.5, dof / (dof + t * t))
    return np.where(t >= 0, 1.0 - tail, tail)


def _student_t_pdf(t, dof):
    log_norm = special.gammaln(0.5 * (dof + 1)) - special.gammaln(0.5 * dof) - 0.5 * math.log(dof * math.pi)
    return math.exp(log_norm - 0.5 * (dof + 1) * math.log1p(t * t / dof))


def t_critical(dof: float, level: float, tol: float = 1e-10) -> float:
    """Two-sided Student-t critical value, ``CDF(t) = (1 + level) / 2``.

    Safeguarded Newton iteration on the incomplete-beta form of the CDF.
    """
    if dof < 1:
        raise ValueError("dof must be at least 1")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    target = 0.5 * (1.0 + level)
    lo, hi = 0.0, 1.0
    while student_t_cdf(hi, dof) < target:
        hi *= 2.0
    t = min(max(normal_critical(level), lo), hi)
    for _ in range(200):
        f = float(student_t_cdf(t, dof)) - target
        if f > 0:
            hi = t
        else:
            lo = t
        step = f / _student_t_pdf(t, dof)
        t_new = t - step
        if not lo < t_new < hi:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= tol * max(1.0, abs(t)):
            return t_new
        t = t_new
    return t


# ---------------------------------------------------------------- multivariate sampling


class CovarianceError(np.linalg.LinAlgError):
    pass


def robust_cholesky(cov) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter for near-singular input."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    k = cov.shape[0]
    cov = 0.5 * (cov + cov.T)
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.abs(np.diag(cov)).sum()) / k  # trace / k for a PSD matrix
    jitter = 1e-12 * scale
    while 0 < jitter <= 1e-6 * scale * (1 + 1e-9):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(k))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    smallest = float(np.linalg.eigvalsh(cov)[0])
    raise CovarianceError(f"covariance not positive semidefinite; smallest eigenvalue {smallest:.3e}")


def mvn_sample(mean, cov, rng: np.random.Generator, size=None) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    chol = robust_cholesky(cov)
    if size is None:
        return mean + chol @ rng.standard_normal(mean.shape[0])
    n = int(size)
    z = rng.standard_normal((n, mean.shape[0]))
    return mean + z @ chol.T


# ---------------------------------------------------------------- estimators


def sample_moments(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased sample covariance (divisor n - 1)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    return mean, 0.5 * (cov + cov.T)


def sample_skewness(x) -> np.ndarray:
    """Moment coefficient of skewness per column."""
    x = np.asarray(x, dtype=float)
    centered = x - x.mean(axis=0)
    m2 = np.mean(centered**2, axis=0)
    m3 = np.mean(centered**3, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(m2 > 0, m3 / np.where(m2 > 0, m2, 1.0) ** 1.5, 0.0)
