"""Query configuration sensitivity analysis.

Each query's dispersion over trials run at different configurations is
summarized by its coefficient of variation. Queries in the lowest third of
the observed CV range are configuration-insensitive (CIQ) and can be dropped
from the workload while tuning; the rest (CSQ) form the reduced application.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .executor import TrialRecord

CIQ = "CIQ"
CSQ = "CSQ"


class NothingToTune(ValueError):
    """Every query is insensitive; there is no reduced application."""


def compute_cv(times: Sequence[float]) -> float:
    """Coefficient of variation with the population (1/n) standard deviation."""
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("need at least two durations")
    if np.any(t <= 0):
        raise ValueError("durations must be positive")
    mean = t.mean()
    return float(np.sqrt(np.mean((t - mean) ** 2)) / mean)


@dataclass(frozen=True)
class CvReport:
    cvs: tuple[float, ...]
    width: float
    threshold: float
    labels: tuple[str, ...]
    csq_indices: tuple[int, ...]
    n: int = 0
    query_ids: tuple[str, ...] = ()

    @property
    def ciq_indices(self) -> tuple[int, ...]:
        return tuple(i for i, lab in enumerate(self.labels) if lab == CIQ)

    def to_dict(self) -> dict:
        ids = self.query_ids or tuple(str(i) for i in range(len(self.cvs)))
        return {
            "n": self.n,
            "width": self.width,
            "threshold": self.threshold,
            "csq_indices": list(self.csq_indices),
            "queries": [
                {"index": i, "id": q, "cv": cv, "label": lab}
                for i, (q, cv, lab) in enumerate(zip(ids, self.cvs, self.labels))
            ],
        }


def classify(matrix: np.ndarray, query_ids: Sequence[str] = ()) -> CvReport:
    """Label queries from an m x n matrix of durations (rows = queries)."""
    S = np.asarray(matrix, dtype=float)
    if S.ndim != 2 or S.shape[0] < 2 or S.shape[1] < 2:
        raise ValueError(f"need at least 2 queries and 2 trials, got shape {S.shape}")
    cvs = [compute_cv(row) for row in S]
    lo, hi = min(cvs), max(cvs)
    width = (hi - lo) / 3.0
    threshold = lo + width
    # the insensitive interval is half-open: [0, min + width)
    labels = tuple(CIQ if cv < threshold else CSQ for cv in cvs)
    csq = tuple(i for i, lab in enumerate(labels) if lab == CSQ)
    return CvReport(tuple(cvs), width, threshold, labels, csq, S.shape[1], tuple(query_ids))


def query_time_matrix(trials: Sequence[TrialRecord], m: int) -> np.ndarray:
    """Stack ok full-workload trials into an m x n matrix; failures are skipped."""
    cols = []
    for t in trials:
        if not t.ok:
            continue
        by_q = t.times_by_query()
        if len(by_q) < m or any(i not in by_q for i in range(m)):
            continue
        cols.append([by_q[i] for i in range(m)])
    if not cols:
        return np.empty((m, 0))
    return np.array(cols, dtype=float).T


def cv_stability(reports: Sequence[CvReport], rel_tol: float = 0.05) -> bool:
    """True when the last two checkpoints agree on every query's CV.

    Agreement means the largest per-query CV change is below ``rel_tol`` times
    the largest CV at the latest checkpoint.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports")
    prev, last = reports[-2], reports[-1]
    a, b = np.asarray(prev.cvs), np.asarray(last.cvs)
    scale = max(float(b.max()), 1e-300)
    return bool(np.max(np.abs(b - a)) < rel_tol * scale)


def reduce(report: CvReport) -> tuple[int, ...]:
    """Indices of the reduced query application (the CSQs)."""
    if not report.csq_indices:
        raise NothingToTune("no configuration-sensitive queries")
    return report.csq_indices
