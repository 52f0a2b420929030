"""Important-parameter identification.

Two stages: a Spearman-correlation filter over the raw parameters (CPS),
then Gaussian-kernel PCA over the survivors (CPE) to obtain a handful of
nonlinear features for the surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

SCC_THRESHOLD = 0.2
FALLBACK_TOP = 5
MIN_SAMPLES = 20
MASS = 0.85


@dataclass(frozen=True)
class SampleSet:
    """Rows of (normalized configuration, datasize in GB, objective seconds)."""

    configs: np.ndarray
    datasizes: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        if self.configs.ndim != 2 or self.configs.shape[0] != self.times.shape[0]:
            raise ValueError("configs must be n x k and aligned with times")
        if np.any(self.times <= 0):
            raise ValueError("times must be positive")

    @property
    def n(self) -> int:
        return self.configs.shape[0]

    @property
    def k(self) -> int:
        return self.configs.shape[1]


def _is_constant(a: np.ndarray) -> bool:
    return bool(np.all(a == a[0]))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks. Constant inputs give 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and the same length")
    if x.size < 3:
        raise ValueError("need at least 3 observations")
    if _is_constant(x) or _is_constant(y):
        return 0.0
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    r = float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class CpsResult:
    retained: tuple[int, ...]
    scc: tuple[float, ...]
    degenerate: tuple[int, ...] = ()
    fallback: bool = False

    def top(self, n: int = 5) -> list[int]:
        """Parameter indices ranked by |scc|, strongest first."""
        order = sorted(range(len(self.scc)), key=lambda p: (-abs(self.scc[p]), p))
        return order[:n]


def cps(samples: SampleSet, min_samples: int = MIN_SAMPLES, threshold: float = SCC_THRESHOLD) -> CpsResult:
    if samples.n < min_samples:
        raise ValueError(f"CPS needs at least {min_samples} samples, got {samples.n}")
    scc, degenerate = [], []
    for p in range(samples.k):
        col = samples.configs[:, p]
        if _is_constant(col) or _is_constant(samples.times):
            degenerate.append(p)
        scc.append(spearman(col, samples.times))
    retained = tuple(p for p, r in enumerate(scc) if abs(r) >= threshold)
    res = CpsResult(retained, tuple(scc), tuple(degenerate))
    if not retained:
        return CpsResult(tuple(sorted(res.top(FALLBACK_TOP))), res.scc, res.degenerate, True)
    return res


def bandwidth_median(rows: np.ndarray) -> float:
    """Median-heuristic gamma = 1 / (2 median^2) over distinct row pairs."""
    X = np.unique(np.asarray(rows, dtype=float), axis=0)
    if X.shape[0] < 2:
        raise ValueError("need at least two distinct rows")
    d2 = _sqdist(X, X)
    iu = np.triu_indices(X.shape[0], 1)
    med = float(np.median(np.sqrt(d2[iu])))
    return 1.0 / (2.0 * med * med)


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def select_components(eigenvalues: Sequence[float], rk: int, mass: float = MASS) -> int:
    """Smallest d reaching ``mass`` of the positive spectrum, clamped to [1, ceil(rk/3)]."""
    lam = np.asarray(eigenvalues, dtype=float)
    pos = lam[lam > 0]
    if pos.size == 0:
        raise ValueError("no positive eigenvalue")
    frac = np.cumsum(pos) / pos.sum()
    d = int(np.searchsorted(frac, mass - 1e-12) + 1)
    return max(1, min(d, math.ceil(rk / 3), pos.size))


@dataclass(frozen=True)
class KpcaModel:
    retained: tuple[int, ...]
    train: np.ndarray
    gamma: float
    eigenvalues: np.ndarray
    alphas: np.ndarray
    col_means: np.ndarray
    grand_mean: float
    kernel: str = "gaussian"
    projections: np.ndarray = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.alphas.shape[1]

    def gram(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        if self.kernel == "linear":
            return A @ B.T
        return np.exp(-self.gamma * _sqdist(A, B))


def kpca_fit(
    samples: SampleSet | np.ndarray,
    retained: Sequence[int],
    kernel: str = "gaussian",
    d: int | None = None,
    gamma: float | None = None,
) -> KpcaModel:
    """Fit kernel PCA on the retained columns.

    ``kernel="linear"`` exists so tests can compare against ordinary PCA.
    ``gamma`` overrides the median-heuristic bandwidth.
    Component signs are fixed by making the largest-magnitude coefficient
    positive, which makes the fit deterministic.
    """
    configs = samples.configs if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    retained = tuple(int(p) for p in retained)
    if len(retained) < 1:
        raise ValueError("need at least one retained parameter")
    X = configs[:, list(retained)]
    n = X.shape[0]
    if n < 3:
        raise ValueError("KPCA needs at least 3 rows")
    if np.unique(X, axis=0).shape[0] < 2:
        raise ValueError("all rows identical: zero kernel variance")
    if kernel == "linear":
        gamma = 0.0
    elif gamma is None:
        gamma = bandwidth_median(X)
    model = KpcaModel(retained, X, gamma, np.empty(0), np.empty((n, 0)), np.empty(n), 0.0, kernel)
    K = model.gram(X, X)
    col_means = K.mean(axis=0)
    grand = float(K.mean())
    Kc = K - col_means[None, :] - col_means[:, None] + grand
    Kc = 0.5 * (Kc + Kc.T)
    lam, V = np.linalg.eigh(Kc)
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    tol = max(float(lam[0]), 0.0) * 1e-10
    if lam[0] <= tol:
        raise ValueError("zero kernel variance after centering")
    if d is None:
        d = select_components(np.where(lam > tol, lam, 0.0), len(retained))
    d = min(d, int(np.sum(lam > tol)))
    alphas = V[:, :d] / np.sqrt(lam[:d])
    for c in range(d):
        j = int(np.argmax(np.abs(alphas[:, c])))
        if alphas[j, c] < 0:
            alphas[:, c] = -alphas[:, c]
    proj = Kc @ alphas
    return KpcaModel(retained, X, gamma, lam, alphas, col_means, grand, kernel, proj)


def kpca_project(model: KpcaModel, X: np.ndarray) -> np.ndarray:
    """Project rows given on the retained (normalized) parameters."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(model.retained):
        raise ValueError(f"expected {len(model.retained)} retained columns, got {X.shape[1]}")
    Kx = model.gram(X, model.train)
    Kxc = Kx - Kx.mean(axis=1, keepdims=True) - model.col_means[None, :] + model.grand_mean
    return Kxc @ model.alphas
