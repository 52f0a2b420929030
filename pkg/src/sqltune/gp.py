"""Gaussian-process regression with a Matern-5/2 ARD kernel.

Targets are expected in standardized units (zero prior mean). Hyperparameter
uncertainty is handled by elliptical slice sampling in log space under
log-normal priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)

PRIOR_LENGTHSCALE = (1.0, 1.0)  # (median, log-sd)
PRIOR_SIGNAL = (1.0, 1.0)
PRIOR_NOISE = (0.01, 1.0)


class IllConditionedError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GpHyper:
    lengthscales: tuple[float, ...]
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        if any(not l > 0 for l in self.lengthscales):
            raise ValueError("lengthscales must be positive")
        if not self.signal_variance > 0:
            raise ValueError("signal variance must be positive")
        if not self.noise_variance >= 0:
            raise ValueError("noise variance must be non-negative")

    def to_log(self) -> np.ndarray:
        return np.concatenate(
            [np.log(self.lengthscales), [math.log(self.signal_variance), math.log(self.noise_variance)]]
        )

    @classmethod
    def from_log(cls, theta: np.ndarray) -> "GpHyper":
        e = np.exp(theta)
        return cls(tuple(float(v) for v in e[:-2]), float(e[-2]), float(e[-1]))


def _scaled_sqdist(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    A = A / ls
    B = B / ls
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def _matern52(d2: np.ndarray, sf2: float) -> np.ndarray:
    r = np.sqrt(d2)
    return sf2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * d2) * np.exp(-SQRT5 * r)


def kernel_matrix(A: np.ndarray, B: np.ndarray, hyper: GpHyper) -> np.ndarray:
    ls = np.asarray(hyper.lengthscales, dtype=float)
    return _matern52(_scaled_sqdist(np.atleast_2d(A), np.atleast_2d(B), ls), hyper.signal_variance)


def kernel(a: Sequence[float], b: Sequence[float], hyper: GpHyper) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.shape[0] != len(hyper.lengthscales):
        raise ValueError("input lengths must match each other and the lengthscales")
    r2 = float(np.sum(((a - b) / np.asarray(hyper.lengthscales)) ** 2))
    r = math.sqrt(r2)
    return hyper.signal_variance * (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * math.exp(-SQRT5 * r)


@dataclass(frozen=True)
class GpModel:
    X: np.ndarray
    y: np.ndarray
    hyper: GpHyper
    L: np.ndarray
    alpha: np.ndarray
    jitter: float

    @property
    def n(self) -> int:
        return self.X.shape[0]


def _cholesky(K: np.ndarray, sf2: float, noise: float) -> tuple[np.ndarray, float]:
    n = K.shape[0]
    jitter = 0.0 if noise >= 1e-6 * sf2 else 1e-8 * sf2
    while True:
        try:
            L = np.linalg.cholesky(K + (noise + jitter) * np.eye(n))
            if np.all(np.isfinite(L)):
                return L, jitter
        except np.linalg.LinAlgError:
            pass
        jitter = max(2.0 * jitter, 1e-8 * sf2)
        if jitter > 1e-2 * sf2:
            raise IllConditionedError("covariance not positive definite at maximum jitter")


def fit(X: np.ndarray, y: Sequence[float], hyper: GpHyper) -> GpModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise ValueError("X and y must have the same nonzero number of rows")
    if X.shape[1] != len(hyper.lengthscales):
        raise ValueError(f"inputs have {X.shape[1]} dims, hyper has {len(hyper.lengthscales)}")
    K = kernel_matrix(X, X, hyper)
    L, jitter = _cholesky(K, hyper.signal_variance, hyper.noise_variance)
    alpha = solve_triangular(L.T, solve_triangular(L, y, lower=True), lower=False)
    return GpModel(X, y, hyper, L, alpha, jitter)


def predict(model: GpModel, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent variance at each row of ``Xs``."""
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    if Xs.shape[1] != model.X.shape[1]:
        raise ValueError(f"expected {model.X.shape[1]} input dims, got {Xs.shape[1]}")
    Ks = kernel_matrix(Xs, model.X, model.hyper)
    mean = Ks @ model.alpha
    v = solve_triangular(model.L, Ks.T, lower=True)
    var = model.hyper.signal_variance - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def log_marginal_likelihood(model: GpModel) -> float:
    return float(
        -0.5 * model.y @ model.alpha - np.sum(np.log(np.diag(model.L))) - 0.5 * model.n * LOG_2PI
    )


# --------------------------------------------------------------------------
# hyperparameter marginalization
# --------------------------------------------------------------------------


def prior_mean(dim: int) -> np.ndarray:
    return np.concatenate(
        [
            np.full(dim, math.log(PRIOR_LENGTHSCALE[0])),
            [math.log(PRIOR_SIGNAL[0]), math.log(PRIOR_NOISE[0])],
        ]
    )


def prior_sd(dim: int) -> np.ndarray:
    return np.concatenate([np.full(dim, PRIOR_LENGTHSCALE[1]), [PRIOR_SIGNAL[1], PRIOR_NOISE[1]]])


class _Evidence:
    """Log marginal likelihood as a function of log-hyperparameters."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = X
        self.y = y
        self.n = X.shape[0]
        # pairwise per-dimension squared differences, reused for every theta
        diff = X[:, None, :] - X[None, :, :]
        self.D2 = diff * diff
        self.eye = np.eye(self.n)

    def __call__(self, theta: np.ndarray) -> float:
        ls2 = np.exp(2.0 * theta[:-2])
        sf2 = math.exp(theta[-2])
        sn2 = math.exp(theta[-1])
        d2 = self.D2 @ (1.0 / ls2)
        K = _matern52(d2, sf2)
        try:
            L = np.linalg.cholesky(K + (sn2 + 1e-8 * sf2) * self.eye)
        except np.linalg.LinAlgError:
            return -math.inf
        a = solve_triangular(L, self.y, lower=True)
        return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * self.n * LOG_2PI)


def elliptical_slice(theta, loglik, cur_ll, mu, sd, rng):
    """One elliptical slice sampling move for a N(mu, diag(sd^2)) prior."""
    nu = rng.standard_normal(theta.shape[0]) * sd
    log_y = cur_ll + math.log(rng.random())
    angle = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = angle - 2.0 * math.pi, angle
    f0 = theta - mu
    for _ in range(200):
        prop = mu + f0 * math.cos(angle) + nu * math.sin(angle)
        ll = loglik(prop)
        if ll > log_y:
            return prop, ll
        if angle < 0:
            lo = angle
        else:
            hi = angle
        angle = rng.uniform(lo, hi)
    return theta, cur_ll


def sample_hypers_mcmc(
    X: np.ndarray,
    y: Sequence[float],
    count: int = 10,
    seed: int = 0,
    burn_in: int = 50,
    thin: int = 5,
) -> tuple[list[GpHyper], bool]:
    """Draw ``count`` hyperparameter samples from the posterior.

    Returns ``(samples, degenerate)``. When every target is identical the
    likelihood carries no information, so prior draws are returned and
    ``degenerate`` is True.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("need at least two observations")
    rng = np.random.default_rng(seed)
    dim = X.shape[1]
    mu, sd = prior_mean(dim), prior_sd(dim)
    if np.ptp(y) == 0:
        return [GpHyper.from_log(mu + sd * rng.standard_normal(mu.shape[0])) for _ in range(count)], True
    loglik = _Evidence(X, y)
    theta = mu.copy()
    ll = loglik(theta)
    out = []
    for step in range(burn_in + count * thin):
        theta, ll = elliptical_slice(theta, loglik, ll, mu, sd, rng)
        if step >= burn_in and (step - burn_in + 1) % thin == 0:
            out.append(GpHyper.from_log(theta))
    return out, False
