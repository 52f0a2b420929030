"""Datasize-aware Bayesian optimization step.

The surrogate input is the configuration representation (all normalized
parameters, or KPCA features of the retained ones) plus one datasize
feature. Acquisition is expected improvement averaged over MCMC samples of
the GP hyperparameters, maximized over a finite pool of valid candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from . import gp
from .executor import TrialRecord
from .iicp import KpcaModel, kpca_project
from .space import Configuration, ParamSpace, latin_hypercube, repair_matrix

POOL_SIZE = 2000
N_HYPER = 10
MIN_ITERATIONS = 10
EI_FRACTION = 0.10
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def expected_improvement(mean, variance, best):
    """EI for minimization; vectorized over ``mean`` and ``variance``."""
    mean = np.asarray(mean, dtype=float)
    s = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    imp = best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(s > 0, imp / np.where(s > 0, s, 1.0), 0.0)
    ei = np.where(s > 0, imp * ndtr(z) + s * INV_SQRT_2PI * np.exp(-0.5 * z * z), np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def stop_check(iteration: int, max_pool_ei: float, best_observed: float) -> bool:
    """Stop after at least 10 iterations once max EI < 10% of the incumbent."""
    return iteration >= MIN_ITERATIONS and max_pool_ei < EI_FRACTION * best_observed


@dataclass(frozen=True)
class Encoder:
    """Maps normalized configurations and datasizes to surrogate inputs."""

    space: ParamSpace
    ds_range: tuple[float, float]
    kpca: KpcaModel | None = None

    @property
    def free(self) -> tuple[int, ...]:
        if self.kpca is None:
            return tuple(range(self.space.k))
        return self.kpca.retained

    @property
    def dim(self) -> int:
        return (self.space.k if self.kpca is None else self.kpca.d) + 1

    def ds_feature(self, ds) -> np.ndarray:
        lo, hi = self.ds_range
        ds = np.asarray(ds, dtype=float)
        if hi <= lo:
            return np.zeros_like(ds)
        return (np.log(ds) - math.log(lo)) / (math.log(hi) - math.log(lo))

    def encode(self, U: np.ndarray, ds) -> np.ndarray:
        U = np.atleast_2d(U)
        if self.kpca is None:
            F = U
        else:
            F = kpca_project(self.kpca, U[:, list(self.kpca.retained)])
            P = self.kpca.projections
            lo, hi = P.min(axis=0), P.max(axis=0)
            F = (F - lo) / np.where(hi > lo, hi - lo, 1.0)
        ds = np.broadcast_to(np.asarray(ds, dtype=float), (U.shape[0],))
        return np.column_stack([F, self.ds_feature(ds)])


def trial_objective(t: TrialRecord, queries: Sequence[int] | None) -> float | None:
    """Objective of an ok trial: total time, or the sum over ``queries``."""
    if not t.ok:
        return None
    if queries is None:
        return t.total_time
    by_q = t.times_by_query()
    if any(q not in by_q for q in queries):
        return None
    return float(sum(by_q[q] for q in queries))


@dataclass(frozen=True)
class TrainingSet:
    U: np.ndarray
    ds: np.ndarray
    y: np.ndarray  # seconds, failures penalized
    ok: np.ndarray  # mask of genuinely observed (non-penalized) rows
    configs: tuple[Configuration, ...] = ()


def training_set(space: ParamSpace, history: Sequence[TrialRecord], queries=None) -> TrainingSet:
    rows, ds, ys, ok = [], [], [], []
    observed = [trial_objective(t, queries) for t in history]
    good = [v for v in observed if v is not None]
    worst = max(good) if good else None
    for t, v in zip(history, observed):
        if v is None:
            if t.ok or worst is None:
                continue  # ok trial that lacks the objective's queries
            v = 2.0 * worst
            ok.append(False)
        else:
            ok.append(True)
        rows.append(t.config)
        ds.append(t.datasize)
        ys.append(v)
    U = space.normalize_matrix(space.as_matrix(rows)) if rows else np.empty((0, space.k))
    return TrainingSet(
        U, np.array(ds, dtype=float), np.array(ys, dtype=float), np.array(ok, dtype=bool), tuple(rows)
    )


@dataclass(frozen=True)
class Proposal:
    config: Configuration
    max_ei: float  # seconds
    best: float  # incumbent objective at the target datasize, seconds
    incumbent: Configuration
    degenerate: bool = False


def _standardize(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    mu = float(np.mean(y))
    sd = float(np.std(y))
    if sd <= 0:
        sd = 1.0
    return (y - mu) / sd, mu, sd


def propose(
    history: Sequence[TrialRecord],
    space: ParamSpace,
    kpca: KpcaModel | None,
    datasize: float,
    seed: int,
    *,
    queries: Sequence[int] | None = None,
    ds_range: tuple[float, float] | None = None,
    pool_size: int = POOL_SIZE,
    n_hyper: int = N_HYPER,
) -> Proposal:
    """Pick the pool candidate with the largest MCMC-averaged EI."""
    data = training_set(space, history, queries)
    if not data.ok.any():
        raise ValueError("no ok trials in history")
    if ds_range is None:
        ds_all = np.append(data.ds, datasize)
        ds_range = (float(ds_all.min()), float(ds_all.max()))
    enc = Encoder(space, ds_range, kpca)
    rng = np.random.default_rng(seed)

    X = enc.encode(data.U, data.ds)
    z, mu, sd = _standardize(data.y)
    if X.shape[0] >= 2:
        hypers, degenerate = gp.sample_hypers_mcmc(X, z, n_hyper, seed=int(rng.integers(2**63)))
    else:
        dim = X.shape[1]
        theta = gp.prior_mean(dim)
        hypers, degenerate = [gp.GpHyper.from_log(theta)], True
    models = [gp.fit(X, z, h) for h in hypers]

    # incumbent at the target datasize
    at_ds = data.ok & np.isclose(data.ds, datasize)
    if at_ds.any():
        idx = np.flatnonzero(at_ds)
        i_best = int(idx[np.argmin(data.y[idx])])
        best = float(data.y[i_best])
    else:
        idx = np.flatnonzero(data.ok)
        Xt = enc.encode(data.U[idx], datasize)
        m = np.mean([gp.predict(mod, Xt)[0] for mod in models], axis=0) * sd + mu
        j = int(np.argmin(m))
        i_best, best = int(idx[j]), float(m[j])
    incumbent_u = data.U[i_best]

    free = list(enc.free)
    Up = np.repeat(incumbent_u[None, :], pool_size, axis=0)
    Up[:, free] = latin_hypercube(pool_size, len(free), rng)
    V = repair_matrix(space, space.denormalize_matrix(Up))
    Up = space.normalize_matrix(V)

    Xp = enc.encode(Up, datasize)
    best_z = (best - mu) / sd
    ei = np.zeros(pool_size)
    for mod in models:
        m, v = gp.predict(mod, Xp)
        ei += expected_improvement(m, v, best_z)
    ei *= sd / len(models)

    top = np.flatnonzero(ei == ei.max())
    if top.size > 1:
        sub = Up[top]
        top = top[np.lexsort(sub.T[::-1])]
    choice = int(top[0])
    return Proposal(
        space.from_row(V[choice]),
        float(ei[choice]),
        best,
        data.configs[i_best],
        degenerate,
    )
