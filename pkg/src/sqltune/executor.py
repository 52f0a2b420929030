"""Trial execution backends.

Two backends are provided: a deterministic synthetic multi-query simulator
used for testing and benchmarking the tuner, and a runner that shells out to
an external command for real clusters.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .space import Configuration, ParamSpace, normalize, validate

log = logging.getLogger(__name__)

PHASES = ("warmup", "qcsa-bo", "rqa-bo", "validation")
STATUSES = ("ok", "failed", "timeout")


class BackendError(RuntimeError):
    """The backend could not be run or returned an unusable result."""


class MalformedResultError(BackendError):
    pass


class UnsupportedOracleError(ValueError):
    pass


@dataclass(frozen=True)
class TrialRecord:
    """One workload execution.

    ``queries`` lists the (0-based) query indices timed in this run;
    ``query_times`` is index-aligned with it.
    """

    config: Configuration
    datasize: float
    query_times: tuple[float, ...]
    total_time: float
    phase: str
    status: str = "ok"
    seed_context: int = 0
    queries: tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def times_by_query(self) -> dict[int, float]:
        return dict(zip(self.queries, self.query_times))

    def to_dict(self) -> dict:
        return {
            "config": list(self.config.values),
            "datasize": self.datasize,
            "queries": list(self.queries),
            "query_times": list(self.query_times),
            "total_time": self.total_time,
            "phase": self.phase,
            "status": self.status,
            "seed_context": self.seed_context,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(
            config=Configuration(tuple(d["config"])),
            datasize=d["datasize"],
            query_times=tuple(d["query_times"]),
            total_time=d["total_time"],
            phase=d["phase"],
            status=d["status"],
            seed_context=d["seed_context"],
            queries=tuple(d["queries"]),
        )


# --------------------------------------------------------------------------
# synthetic simulator
# --------------------------------------------------------------------------

EFFECT_KINDS = ("bowl", "linear", "interaction")


@dataclass(frozen=True)
class Effect:
    """One term of a query's configuration response, on normalized axes.

    bowl:        weight * (u[p] - center)^2
    linear:      weight * u[p]   (negative weight makes larger values faster)
    interaction: weight * (u[p] - center) * (u[q] - center2)
    """

    kind: str
    params: tuple[int, ...]
    weight: float = 1.0
    center: float = 0.5
    center2: float = 0.5

    def __post_init__(self):
        if self.kind not in EFFECT_KINDS:
            raise ValueError(f"unknown effect kind {self.kind!r}")
        need = 2 if self.kind == "interaction" else 1
        if len(self.params) != need:
            raise ValueError(f"{self.kind} effect takes {need} parameter(s)")

    def __call__(self, U: np.ndarray) -> np.ndarray:
        a = U[:, self.params[0]]
        if self.kind == "bowl":
            return self.weight * (a - self.center) ** 2
        if self.kind == "linear":
            return self.weight * a
        b = U[:, self.params[1]]
        return self.weight * (a - self.center) * (b - self.center2)


@dataclass(frozen=True)
class SyntheticQuery:
    base_time: float
    datasize_exponent: float = 1.0
    amplitude: float = 0.0
    noise_cv: float = 0.0
    effects: tuple[Effect, ...] = ()

    @property
    def sensitive(self) -> bool:
        return self.amplitude > 0 and len(self.effects) > 0


@dataclass(frozen=True)
class SyntheticApp:
    """Multi-query workload whose per-query time is

    ``base * (ds/ds_ref)**exponent * g(u) * (1 + eps)``

    with ``g(u) = max(1 + amplitude * sum(effects(u)), G_FLOOR)`` and ``eps``
    lognormal noise of the declared coefficient of variation. Noise is drawn
    from a stream keyed by ``(seed, query, trial_index)`` so any subset of
    queries reproduces the durations of a full run exactly.
    """

    space: ParamSpace
    queries: tuple[SyntheticQuery, ...]
    ds_ref: float = 100.0
    seed: int = 0
    query_ids: tuple[str, ...] = ()

    G_FLOOR = 0.05

    @property
    def m(self) -> int:
        return len(self.queries)

    @property
    def ids(self) -> tuple[str, ...]:
        return self.query_ids or tuple(f"q{i + 1:02d}" for i in range(self.m))

    @property
    def sensitive_queries(self) -> list[int]:
        return [i for i, q in enumerate(self.queries) if q.sensitive]

    def shape(self, U: np.ndarray) -> np.ndarray:
        """Noise-free multiplier g for every (configuration row, query)."""
        G = np.ones((U.shape[0], self.m))
        for i, q in enumerate(self.queries):
            if not q.sensitive:
                continue
            s = np.zeros(U.shape[0])
            for e in q.effects:
                s += e(U)
            G[:, i] = np.maximum(1.0 + q.amplitude * s, self.G_FLOOR)
        return G

    def scale(self, datasize: float) -> np.ndarray:
        r = datasize / self.ds_ref
        return np.array([q.base_time * r ** q.datasize_exponent for q in self.queries])

    def noise(self, query: int, trial_index: int) -> float:
        cv = self.queries[query].noise_cv
        if cv <= 0:
            return 1.0
        rng = np.random.default_rng([self.seed, query, trial_index])
        s2 = math.log1p(cv * cv)
        return math.exp(math.sqrt(s2) * rng.standard_normal() - 0.5 * s2)

    def expected_total(self, U: np.ndarray, datasize: float, queries: Sequence[int] | None = None) -> np.ndarray:
        """Noise-free total time for each row of normalized configurations."""
        T = self.shape(np.atleast_2d(U)) * self.scale(datasize)
        if queries is not None:
            T = T[:, list(queries)]
        return T.sum(axis=1)


def synth_eval(app: SyntheticApp, config: Configuration, datasize: float, trial_index: int) -> list[float]:
    u = normalize(app.space, config)
    base = (app.shape(u[None, :])[0] * app.scale(datasize)).tolist()
    return [b * app.noise(i, trial_index) for i, b in enumerate(base)]


def synth_known_optimum(app: SyntheticApp, datasize: float | None = None) -> tuple[Configuration, float]:
    """Closed-form minimizer of the noise-free total for bowl-only apps.

    A sum of axis-aligned quadratic bowls is separable, so each axis is
    minimized independently (coefficient-weighted center, clipped to [0, 1])
    and snapped to its grid. Unconstrained axes keep their default value.
    """
    ds = app.ds_ref if datasize is None else datasize
    space = app.space
    scale = app.scale(ds)
    quad = np.zeros(space.k)
    lin = np.zeros(space.k)
    for i, q in enumerate(app.queries):
        if not q.sensitive:
            continue
        for e in q.effects:
            if e.kind != "bowl":
                raise UnsupportedOracleError(f"query {i}: {e.kind} effect has no closed-form oracle")
            if e.weight < 0:
                raise UnsupportedOracleError(f"query {i}: inverted bowl has no interior minimum")
            c = scale[i] * q.amplitude * e.weight
            quad[e.params[0]] += c
            lin[e.params[0]] += c * e.center
    V = space.as_matrix([space.default_config()])
    U = space.normalize_matrix(V)
    for j in range(space.k):
        if quad[j] > 0:
            U[0, j] = min(max(lin[j] / quad[j], 0.0), 1.0)
    Vopt = space.denormalize_matrix(U)
    # grid snapping of a 1-D convex quadratic can land one step off the best grid point
    for j in range(space.k):
        if quad[j] <= 0:
            continue
        p = space.params[j]
        cands = [Vopt[0, j]]
        if p.is_bool:
            cands = [0.0, 1.0]
        elif p.step is not None:
            cands += [Vopt[0, j] - p.step, Vopt[0, j] + p.step]
        best = None
        for v in cands:
            if not p.is_bool and not (p.lower - 1e-9 <= v <= p.upper + 1e-9):
                continue
            trial = Vopt.copy()
            trial[0, j] = v
            tot = app.expected_total(space.normalize_matrix(trial), ds)[0]
            if best is None or tot < best[0] - 1e-12:
                best = (tot, v)
        Vopt[0, j] = best[1]
    config = space.from_row(Vopt[0])
    problems = validate(space, config)
    if problems:
        raise UnsupportedOracleError("analytic optimum violates constraints: " + "; ".join(problems))
    total = float(app.expected_total(space.normalize_matrix(space.as_matrix([config])), ds)[0])
    return config, total


def app_to_dict(app: SyntheticApp, ground_truth: dict | None = None) -> dict:
    names = app.space.names
    qs = []
    for qid, q in zip(app.ids, app.queries):
        qs.append(
            {
                "id": qid,
                "base_time": q.base_time,
                "datasize_exponent": q.datasize_exponent,
                "amplitude": q.amplitude,
                "noise_cv": q.noise_cv,
                "effects": [
                    {
                        "kind": e.kind,
                        "params": [names[p] for p in e.params],
                        "weight": e.weight,
                        "center": e.center,
                        "center2": e.center2,
                    }
                    for e in q.effects
                ],
            }
        )
    doc = {"space_digest": app.space.digest(), "ds_ref": app.ds_ref, "seed": app.seed, "queries": qs}
    if ground_truth is not None:
        doc["ground_truth"] = ground_truth
    return doc


def app_from_dict(doc: dict, space: ParamSpace) -> SyntheticApp:
    digest = doc.get("space_digest")
    if digest and digest != space.digest():
        raise ValueError("synthetic app was generated against a different parameter space")
    queries, ids = [], []
    for q in doc["queries"]:
        effects = tuple(
            Effect(
                e["kind"],
                tuple(space.index(n) for n in e["params"]),
                e.get("weight", 1.0),
                e.get("center", 0.5),
                e.get("center2", 0.5),
            )
            for e in q.get("effects", [])
        )
        queries.append(
            SyntheticQuery(
                q["base_time"],
                q.get("datasize_exponent", 1.0),
                q.get("amplitude", 0.0),
                q.get("noise_cv", 0.0),
                effects,
            )
        )
        ids.append(str(q.get("id", f"q{len(ids) + 1:02d}")))
    return SyntheticApp(space, tuple(queries), doc.get("ds_ref", 100.0), doc.get("seed", 0), tuple(ids))


def load_app(path: str | Path, space: ParamSpace) -> SyntheticApp:
    return app_from_dict(json.loads(Path(path).read_text()), space)


def make_synthetic_app(
    space: ParamSpace,
    *,
    n_queries: int = 40,
    n_sensitive: int = 10,
    important: Sequence[int] | int = 5,
    seed: int = 0,
    amplitude: float = 2.5,
    noise_cv: float = 0.02,
    sensitive_base: tuple[float, float] = (20.0, 40.0),
    insensitive_base: tuple[float, float] = (5.0, 15.0),
    ds_ref: float = 100.0,
    center_range: tuple[float, float] = (0.15, 0.85),
    importance_decay: float = 1.0,
    insensitive_noise_cv: float | None = None,
) -> SyntheticApp:
    """Seeded bowl-shaped app with a known optimum.

    Each sensitive query carries a bowl on every important parameter, all
    sharing one center per parameter so the optimum is the bowl center.
    Insensitive queries are flat apart from run-to-run noise.
    Centers are drawn from ``center_range`` and mirrored about 0.5 with
    probability one half. The r-th important parameter's weights are scaled
    by ``importance_decay ** r``.
    """
    rng = np.random.default_rng(seed)
    if isinstance(important, int):
        candidates = [
            j
            for j, p in enumerate(space.params)
            if not p.is_bool
            and not any(p.name in c.terms for c in space.constraints)
            and (p.n_steps is None or p.n_steps >= 4)
        ]
        important = sorted(rng.choice(candidates, size=important, replace=False).tolist())
    important = list(important)
    centers = {}
    for j in important:
        c = rng.uniform(*center_range)
        centers[j] = 1.0 - c if rng.random() < 0.5 else c
    sens = set(rng.choice(n_queries, size=n_sensitive, replace=False).tolist())
    queries = []
    for i in range(n_queries):
        if i in sens:
            weights = rng.uniform(0.5, 1.5, size=len(important)) * importance_decay ** np.arange(len(important))
            effects = tuple(Effect("bowl", (j,), float(w), float(centers[j])) for j, w in zip(important, weights))
            queries.append(
                SyntheticQuery(float(rng.uniform(*sensitive_base)), 1.0, amplitude, noise_cv, effects)
            )
        else:
            cv = noise_cv if insensitive_noise_cv is None else insensitive_noise_cv
            queries.append(SyntheticQuery(float(rng.uniform(*insensitive_base)), 1.0, 0.0, cv))
    return SyntheticApp(space, tuple(queries), ds_ref, seed)


# --------------------------------------------------------------------------
# backends
# --------------------------------------------------------------------------


class SyntheticBackend:
    """Runs trials on a :class:`SyntheticApp`; records every call."""

    def __init__(self, app: SyntheticApp):
        self.app = app
        self.calls: list[tuple[int, tuple[int, ...]]] = []

    @property
    def query_ids(self) -> tuple[str, ...]:
        return self.app.ids

    def execute(self, config, datasize, queries, trial_index):
        self.calls.append((trial_index, tuple(queries)))
        times = synth_eval(self.app, config, datasize, trial_index)
        return "ok", [times[i] for i in queries], sum(times[i] for i in queries)


class CommandBackend:
    """Runs an external command per trial.

    The template may reference ``{CONFIG_FILE}``, ``{DATASIZE_GB}``,
    ``{QUERY_LIST}`` and ``{OUTPUT_FILE}``. The command must write
    ``{"queries": [{"id": ..., "seconds": ...}, ...]}`` to OUTPUT_FILE.
    When ``query_ids`` is not given, the first full run discovers them.
    """

    MIN_TIMEOUT = 600.0

    def __init__(
        self,
        template: str,
        space: ParamSpace,
        query_ids: Sequence[str] | None = None,
        timeout: float | None = None,
    ):
        self.template = template
        self.space = space
        self._ids = tuple(query_ids) if query_ids else None
        self.timeout = timeout
        self.longest_ok = 0.0

    @property
    def query_ids(self) -> tuple[str, ...] | None:
        return self._ids

    def current_timeout(self) -> float:
        if self.timeout is not None:
            return self.timeout
        return max(self.MIN_TIMEOUT, 3.0 * self.longest_ok)

    def write_config(self, config: Configuration, path: Path):
        lines = []
        for p, v in zip(self.space.params, config.values):
            if p.is_bool:
                v = "true" if v else "false"
            lines.append(f"{p.name}={v}")
        path.write_text("\n".join(lines) + "\n")

    def execute(self, config, datasize, queries, trial_index):
        with tempfile.TemporaryDirectory(prefix="sqltune-") as tmp:
            cfg = Path(tmp) / "config.properties"
            out = Path(tmp) / "result.json"
            self.write_config(config, cfg)
            if self._ids is None:
                qlist = "all"
            else:
                qlist = ",".join(self._ids[i] for i in queries)
            cmd = self.template.format(
                CONFIG_FILE=shlex.quote(str(cfg)),
                DATASIZE_GB=f"{datasize:g}",
                QUERY_LIST=shlex.quote(qlist),
                OUTPUT_FILE=shlex.quote(str(out)),
            )
            start = time.monotonic()
            try:
                proc = subprocess.run(
                    cmd, shell=True, timeout=self.current_timeout(), capture_output=True, text=True
                )
            except subprocess.TimeoutExpired:
                return "timeout", [], time.monotonic() - start
            except OSError as e:
                raise BackendError(f"could not spawn backend command: {e}") from e
            elapsed = time.monotonic() - start
            if proc.returncode == 127:
                raise BackendError(f"backend command not found: {proc.stderr.strip()}")
            if proc.returncode != 0:
                log.warning("trial %d exited with %d: %s", trial_index, proc.returncode, proc.stderr.strip()[-500:])
                return "failed", [], elapsed
            times = self._parse(out, queries)
        self.longest_ok = max(self.longest_ok, sum(times))
        return "ok", times, sum(times)

    def _parse(self, out: Path, queries) -> list[float]:
        try:
            doc = json.loads(out.read_text())
            rows = [(str(r["id"]), float(r["seconds"])) for r in doc["queries"]]
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise MalformedResultError(f"unreadable result file: {e}") from e
        if self._ids is None:
            self._ids = tuple(r[0] for r in rows)
            return [r[1] for r in rows]
        want = [self._ids[i] for i in queries]
        got = dict(rows)
        missing = [q for q in want if q not in got]
        if missing:
            raise MalformedResultError(f"result file omits queries: {', '.join(missing)}")
        if any(got[q] < 0 for q in want):
            raise MalformedResultError("negative query duration in result file")
        return [got[q] for q in want]


def run_trial(
    backend,
    config: Configuration,
    datasize: float,
    query_subset: Sequence[int] | None = None,
    *,
    phase: str = "qcsa-bo",
    trial_index: int = 0,
) -> TrialRecord:
    if datasize <= 0:
        raise ValueError("datasize must be > 0")
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    ids = backend.query_ids
    m = len(ids) if ids is not None else None
    if query_subset is None:
        queries = tuple(range(m)) if m is not None else None
    else:
        queries = tuple(int(i) for i in query_subset)
        if m is not None and any(i < 0 or i >= m for i in queries):
            raise ValueError(f"query subset out of range 0..{m - 1}")
    status, times, total = backend.execute(config, datasize, queries if queries is not None else (), trial_index)
    if queries is None:
        ids = backend.query_ids
        queries = tuple(range(len(ids))) if ids is not None else ()
    if status != "ok":
        return TrialRecord(config, float(datasize), (), float(total), phase, status, trial_index, queries)
    times = tuple(float(t) for t in times)
    return TrialRecord(config, float(datasize), times, float(sum(times)), phase, "ok", trial_index, queries)
