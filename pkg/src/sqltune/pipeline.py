"""End-to-end tuning loop with persistent, resumable trial history.

Phases: an LHS warm start and full-workload BO until ``n_qcsa`` trials have
succeeded; then sensitivity analysis picks the reduced query set, parameter
identification builds the reduced representation, and BO continues on the
reduced workload until the stop rule fires or the budget runs out. A final
full-workload run validates the chosen configuration.

Every decision is a pure function of (seed, space, history), so a truncated
history resumes into exactly the run it was cut from.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dagp import Proposal, propose, stop_check, trial_objective
from .executor import TrialRecord, run_trial
from .iicp import CpsResult, KpcaModel, SampleSet, cps, kpca_fit
from .qcsa import CvReport, NothingToTune, classify, cv_stability, query_time_matrix, reduce
from .space import Configuration, ParamSpace, lhs_sample

log = logging.getLogger(__name__)

HISTORY_FORMAT = 1
MAX_CONSECUTIVE_FAILURES = 3
TRANSFER_TOLERANCE = 0.05


class TuningAborted(RuntimeError):
    def __init__(self, msg, session=None):
        super().__init__(msg)
        self.session = session


class HistoryMismatch(ValueError):
    """The history file was produced against a different space or setup."""


@dataclass(frozen=True)
class Budgets:
    n_qcsa: int = 30
    n_iicp: int = 20
    lhs_start: int = 3
    max_trials: int = 100


@dataclass(frozen=True)
class Analysis:
    """Outcome of the sensitivity and parameter-identification steps."""

    report: CvReport
    rqa: tuple[int, ...]
    fallback_full: bool
    cps: CpsResult | None
    kpca: KpcaModel | None
    ciq_mean: dict  # datasize -> mean summed CIQ seconds over the analysed trials


@dataclass
class TuningSession:
    space: ParamSpace
    backend: object
    datasizes: Sequence[float] = (100.0,)
    budgets: Budgets = field(default_factory=Budgets)
    seed: int = 0
    history: list[TrialRecord] = field(default_factory=list)
    reduce: bool = True
    stop_rule: bool = True
    pool_size: int = 2000
    n_hyper: int = 10
    stop_event: dict | None = None
    wall_time: float = 0.0

    def __post_init__(self):
        self.datasizes = tuple(float(d) for d in self.datasizes)
        if not self.datasizes or any(d <= 0 for d in self.datasizes):
            raise ValueError("datasizes must be positive")
        self._analysis: Analysis | None = None

    # ---- derived state ----

    @property
    def target_datasize(self) -> float:
        return self.datasizes[0]

    @property
    def ds_range(self) -> tuple[float, float]:
        return (min(self.datasizes), max(self.datasizes))

    def datasize_for(self, trial_index: int) -> float:
        return self.datasizes[trial_index % len(self.datasizes)]

    @property
    def m(self) -> int:
        ids = self.backend.query_ids
        return len(ids) if ids else 0

    def full_ok(self) -> list[TrialRecord]:
        m = self.m
        return [t for t in self.history if t.ok and len(t.queries) == m and t.phase != "validation"]

    @property
    def phase(self) -> str:
        if any(t.phase == "validation" for t in self.history):
            return "done"
        if len(self.history) < self.budgets.lhs_start:
            return "warmup"
        if not self.reduce or len(self.full_ok()) < self.budgets.n_qcsa:
            return "qcsa-bo"
        return "rqa-bo"

    def analysis(self) -> Analysis | None:
        if not self.reduce:
            return None
        if self._analysis is None and len(self.full_ok()) >= self.budgets.n_qcsa:
            self._analysis = analyze(self)
        return self._analysis

    @property
    def objective_queries(self) -> tuple[int, ...] | None:
        a = self.analysis()
        return None if a is None or a.fallback_full else a.rqa

    def full_equivalent(self, t: TrialRecord) -> float | None:
        """Objective on the full workload, estimating dropped queries by their mean."""
        if not t.ok:
            return None
        if len(t.queries) == self.m:
            return t.total_time
        a = self.analysis()
        v = trial_objective(t, a.rqa)
        if v is None:
            return None
        return v + _ciq_estimate(a, t.datasize)

    @property
    def best(self) -> tuple[Configuration, float, float] | None:
        """Incumbent (configuration, full-workload seconds, datasize)."""
        cands = [t for t in self.history if t.ok and t.phase != "validation"]
        at = [t for t in cands if t.datasize == self.target_datasize] or cands
        if not at:
            return None
        q = self.objective_queries
        scored = [(trial_objective(t, q), i, t) for i, t in enumerate(at)]
        scored = [s for s in scored if s[0] is not None]
        if not scored:
            return None
        _, _, t = min(scored, key=lambda s: (s[0], s[1]))
        return t.config, self.full_equivalent(t), t.datasize


def _ciq_estimate(a: Analysis, ds: float) -> float:
    if ds in a.ciq_mean:
        return a.ciq_mean[ds]
    # scale the nearest analysed datasize linearly
    ref = min(a.ciq_mean, key=lambda d: abs(d - ds))
    return a.ciq_mean[ref] * ds / ref


def analyze(session: TuningSession) -> Analysis:
    """Run sensitivity analysis and parameter identification on the history."""
    b = session.budgets
    trials = session.full_ok()[: b.n_qcsa]
    ids = tuple(session.backend.query_ids)
    S = query_time_matrix(trials, session.m)
    report = classify(S, ids)
    try:
        rqa = reduce(report)
        fallback = len(rqa) == session.m
    except NothingToTune:
        rqa, fallback = tuple(range(session.m)), True
    ciq = [i for i in range(session.m) if i not in rqa]
    ciq_mean = {}
    for ds in sorted({t.datasize for t in trials}):
        cols = [j for j, t in enumerate(trials) if t.datasize == ds]
        ciq_mean[ds] = float(S[np.ix_(ciq, cols)].sum(axis=0).mean()) if ciq else 0.0

    sample_trials = trials[: b.n_iicp]
    space = session.space
    U = space.normalize_matrix(space.as_matrix([t.config for t in sample_trials]))
    y = np.array([trial_objective(t, rqa) for t in sample_trials])
    ds = np.array([t.datasize for t in sample_trials])
    cps_res = kpca = None
    try:
        samples = SampleSet(U, ds, y)
        cps_res = cps(samples, min_samples=min(b.n_iicp, len(sample_trials)))
        kpca = kpca_fit(samples, cps_res.retained)
    except ValueError as e:
        log.warning("parameter identification skipped: %s", e)
    return Analysis(report, tuple(rqa), fallback, cps_res, kpca, ciq_mean)


def qcsa_stability(session: TuningSession) -> dict:
    """Per-checkpoint CV stability over the analysed trials (one checkpoint per trial)."""
    trials = session.full_ok()[: session.budgets.n_qcsa]
    reports = []
    first = None
    for n in range(2, len(trials) + 1):
        reports.append(classify(query_time_matrix(trials[:n], session.m)))
        if first is None and len(reports) >= 2 and cv_stability(reports[-2:]):
            first = n
    return {"first_stable_n": first, "n": len(trials)}


def iicp_convergence(session: TuningSession, a: Analysis, checkpoints=(5, 10, 15, 20)) -> dict:
    """CPS recomputed on growing prefixes of the identification sample."""
    trials = session.full_ok()[: session.budgets.n_iicp]
    names = session.space.names
    sets = {}
    for n in checkpoints:
        if n > len(trials) or n < 3:
            continue
        sub = trials[:n]
        U = session.space.normalize_matrix(session.space.as_matrix([t.config for t in sub]))
        y = np.array([trial_objective(t, a.rqa) for t in sub])
        res = cps(SampleSet(U, np.array([t.datasize for t in sub]), y), min_samples=n)
        sets[n] = [names[p] for p in res.retained]
    keys = sorted(sets)
    stable = len(keys) >= 2 and sets[keys[-1]] == sets[keys[-2]]
    return {"retained_by_n": {str(n): sets[n] for n in keys}, "stable": stable}


def _trial_seed(seed: int, trial_index: int) -> int:
    return int(np.random.SeedSequence([seed, trial_index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _consecutive_failures(history: Sequence[TrialRecord]) -> int:
    configs = set()
    for t in reversed(history):
        if t.ok:
            break
        configs.add(t.config)
    return len(configs)


def next_action(session: TuningSession) -> tuple[str, Configuration | None, tuple[int, ...] | None, Proposal | None]:
    """Decide the next trial: (phase, configuration, query subset, proposal)."""
    t = len(session.history)
    b = session.budgets
    phase = session.phase
    if phase == "done":
        return "done", None, None, None
    if t >= b.max_trials - 1 or session.stop_event is not None:
        best = session.best
        if best is None:
            return "done", None, None, None
        return "validation", best[0], None, None
    ds = session.datasize_for(t)
    seed = _trial_seed(session.seed, t)
    if phase == "warmup":
        return "warmup", lhs_sample(session.space, b.lhs_start, session.seed)[t], None, None
    if not any(x.ok for x in session.history):
        return phase, lhs_sample(session.space, 1, seed)[0], None, None
    if phase == "qcsa-bo":
        p = propose(
            session.history, session.space, None, ds, seed,
            ds_range=session.ds_range, pool_size=session.pool_size, n_hyper=session.n_hyper,
        )
        if not session.reduce and session.stop_rule and _stop(session, p, "qcsa-bo"):
            return next_action(session)
        return "qcsa-bo", p.config, None, p
    a = session.analysis()
    q = session.objective_queries
    p = propose(
        session.history, session.space, a.kpca, ds, seed,
        queries=q, ds_range=session.ds_range, pool_size=session.pool_size, n_hyper=session.n_hyper,
    )
    if session.stop_rule and _stop(session, p, "rqa-bo"):
        return next_action(session)
    return "rqa-bo", p.config, q, p


def _stop(session: TuningSession, p: Proposal, phase: str) -> bool:
    iteration = sum(1 for t in session.history if t.phase == phase)
    if stop_check(iteration, p.max_ei, p.best):
        session.stop_event = {
            "iteration": iteration,
            "trial_index": len(session.history),
            "max_ei": p.max_ei,
            "best": p.best,
        }
        return True
    return False


def tune(session: TuningSession, history_path: str | Path | None = None) -> tuple[Configuration, dict]:
    """Run (or resume) the tuning loop; returns the best configuration and a report."""
    start = time.monotonic()
    if history_path is not None:
        frag = load_history(history_path)
        if frag is not None:
            check_resume(session, frag)
            session.history = list(frag.records)
    while True:
        phase, config, queries, _ = next_action(session)
        if phase == "done":
            break
        t = len(session.history)
        ds = session.target_datasize if phase == "validation" else session.datasize_for(t)
        rec = run_trial(session.backend, config, ds, queries, phase=phase, trial_index=t)
        session.history.append(rec)
        log.info("trial %d [%s] %s %.3fs", t, phase, rec.status, rec.total_time)
        if history_path is not None:
            save_history(session, history_path)
        if _consecutive_failures(session.history) >= MAX_CONSECUTIVE_FAILURES:
            session.wall_time += time.monotonic() - start
            raise TuningAborted(
                f"backend failed at {MAX_CONSECUTIVE_FAILURES} consecutive distinct configurations", session
            )
    session.wall_time += time.monotonic() - start
    if history_path is not None:
        save_history(session, history_path)
    best = session.best
    return (best[0] if best else None), report(session)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HistoryFragment:
    header: dict
    records: tuple[TrialRecord, ...]


def _header(session: TuningSession) -> dict:
    phases = {}
    for i, t in enumerate(session.history):
        phases.setdefault(t.phase, i)
    return {
        "type": "header",
        "format": HISTORY_FORMAT,
        "space_digest": session.space.digest(),
        "seed": session.seed,
        "budgets": asdict(session.budgets),
        "datasizes": list(session.datasizes),
        "query_ids": list(session.backend.query_ids or ()),
        "reduce": session.reduce,
        "stop_rule": session.stop_rule,
        "phase": session.phase,
        "phase_starts": phases,
        "stop": session.stop_event,
    }


def save_history(session: TuningSession, path: str | Path) -> None:
    """Write header + one JSON line per trial, atomically."""
    path = Path(path)
    lines = [json.dumps(_header(session), sort_keys=True)]
    lines += [json.dumps({"type": "trial", **t.to_dict()}, sort_keys=True) for t in session.history]
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_history(path: str | Path) -> HistoryFragment | None:
    """Read a history file; returns None when it is missing or empty."""
    path = Path(path)
    if not path.exists():
        return None
    header, records = None, []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{n}: {e.msg}") from None
        if obj.get("type") == "header":
            header = obj
        else:
            records.append(TrialRecord.from_dict(obj))
    if header is None and not records:
        return None
    if header is None:
        raise ValueError(f"{path}: history has no header record")
    return HistoryFragment(header, tuple(records))


def check_resume(session: TuningSession, frag: HistoryFragment) -> None:
    h = frag.header
    if h["space_digest"] != session.space.digest():
        raise HistoryMismatch("space digest mismatch: the parameter-space file changed since this history was written")
    if h["seed"] != session.seed:
        raise HistoryMismatch(f"history seed {h['seed']} differs from session seed {session.seed}")
    mine = _header(session)
    for key in ("budgets", "datasizes", "reduce", "stop_rule"):
        if key in h and h[key] != mine[key]:
            raise HistoryMismatch(f"history {key} {h[key]!r} differs from session {key} {mine[key]!r}")


def session_from_history(frag: HistoryFragment, space: ParamSpace, backend) -> TuningSession:
    h = frag.header
    if h["space_digest"] != space.digest():
        raise HistoryMismatch("space digest mismatch: the parameter-space file changed since this history was written")
    return TuningSession(
        space,
        backend,
        datasizes=h["datasizes"],
        budgets=Budgets(**h["budgets"]),
        seed=h["seed"],
        history=list(frag.records),
        reduce=h.get("reduce", True),
        stop_rule=h.get("stop_rule", True),
        stop_event=h.get("stop"),
    )


class RecordedBackend:
    """Stand-in backend for offline work on a saved history; never executes."""

    def __init__(self, query_ids):
        self.query_ids = tuple(query_ids)

    def execute(self, config, datasize, queries, trial_index):
        raise RuntimeError("offline session cannot execute trials")


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------


def config_dict(space: ParamSpace, config: Configuration) -> dict:
    return {p.name: v for p, v in zip(space.params, config.values)}


def report(session: TuningSession) -> dict:
    space = session.space
    ok = [t for t in session.history if t.ok]
    if not ok:
        raise ValueError("no ok trials")
    a = session.analysis()
    trace, run_min = [], float("inf")
    for i, t in enumerate(session.history):
        v = session.full_equivalent(t) if (t.ok and (a is not None or len(t.queries) == session.m)) else None
        if v is not None and t.phase != "validation":
            run_min = min(run_min, v)
        trace.append(
            {
                "trial": i,
                "phase": t.phase,
                "status": t.status,
                "datasize": t.datasize,
                "executed_seconds": t.total_time,
                "objective": v,
                "running_min": run_min if run_min < float("inf") else None,
            }
        )
    best = session.best
    out = {
        "best": {
            "config": config_dict(space, best[0]),
            "objective": best[1],
            "datasize": best[2],
        },
        "trials": len(session.history),
        "executed_seconds": float(sum(t.total_time for t in session.history)),
        "trace": trace,
        "stop": session.stop_event,
        "wall_time": session.wall_time,
        "notes": ["one sensitivity split is kept for the whole session, regardless of datasize changes"],
    }
    val = [t for t in session.history if t.phase == "validation" and t.ok]
    if val:
        v = val[-1].total_time
        est = best[1]
        rel = abs(v - est) / est if est else 0.0
        out["validation"] = {
            "total_time": v,
            "expected": est,
            "relative_gap": rel,
            "transfer_disagreement": bool(rel >= TRANSFER_TOLERANCE),
        }
    if a is not None:
        names = space.names
        out["qcsa"] = a.report.to_dict()
        out["qcsa"]["fallback_full"] = a.fallback_full
        out["qcsa"]["stability"] = qcsa_stability(session)
        out["rqa"] = [session.backend.query_ids[i] for i in a.rqa]
        if a.cps is not None:
            out["cps"] = {
                "objective": "full" if a.fallback_full else "rqa-sum",
                "fallback": a.cps.fallback,
                "retained": [names[p] for p in a.cps.retained],
                "scc": [
                    {"param": names[p], "scc": r, "retained": p in a.cps.retained}
                    for p, r in enumerate(a.cps.scc)
                ],
                "top5": [{"param": names[p], "scc": a.cps.scc[p]} for p in a.cps.top(5)],
                "convergence": iicp_convergence(session, a),
            }
        if a.kpca is not None:
            out["cpe"] = {
                "eigenvalues": [float(v) for v in a.kpca.eigenvalues],
                "d": a.kpca.d,
                "gamma": a.kpca.gamma,
            }
    return out
