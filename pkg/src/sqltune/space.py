"""Configuration search space: parameter definitions, resource constraints,
sampling and normalization.

Values of a :class:`Configuration` are kept in the units declared by the
space document (GB, MB, KB, seconds, counts). Constraint arithmetic converts
memory-sized terms to MB.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

KINDS = ("numeric-int", "numeric-real", "boolean")
RESOURCE_CLASSES = (
    "cpu",
    "memory-heap",
    "memory-overhead",
    "memory-offheap",
    "instance-count",
    "none",
)
CONSTRAINT_KINDS = ("sum-le", "product-le")
CLUSTER_FIELDS = (
    "total_cores",
    "total_memory_mb",
    "container_max_cores",
    "container_max_memory_mb",
)
_TO_MB = {"KB": 1.0 / 1024.0, "MB": 1.0, "GB": 1024.0}
_EPS = 1e-9


class SpaceError(ValueError):
    """Malformed or inconsistent parameter-space document."""


class InfeasibleSpaceError(SpaceError):
    """No configuration can satisfy the resource constraints."""


class DefaultInfeasibleError(RuntimeError):
    """The workload fails at a parameter's default value."""


@dataclass(frozen=True)
class ParamDef:
    name: str
    kind: str
    lower: float = 0.0
    upper: float = 1.0
    step: float | None = None
    default: float | bool = 0
    resource_class: str = "none"
    unit: str | None = None
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpaceError(f"{self.name}: unknown kind {self.kind!r}")
        if self.resource_class not in RESOURCE_CLASSES:
            raise SpaceError(f"{self.name}: unknown resource_class {self.resource_class!r}")
        if self.kind == "boolean":
            return
        if self.lower > self.upper:
            raise SpaceError(f"{self.name}: range violation, lower {self.lower} > upper {self.upper}")
        if not self.lower <= self.default <= self.upper:
            raise SpaceError(f"{self.name}: default {self.default} outside [{self.lower}, {self.upper}]")
        if self.kind == "numeric-int":
            if self.step is None or self.step <= 0:
                raise SpaceError(f"{self.name}: numeric-int needs step > 0")
            ratio = (self.upper - self.lower) / self.step
            if abs(ratio - round(ratio)) > 1e-9:
                raise SpaceError(f"{self.name}: range is not a multiple of step {self.step}")
        elif self.step is not None and self.step <= 0:
            raise SpaceError(f"{self.name}: step must be > 0")

    @property
    def is_bool(self) -> bool:
        return self.kind == "boolean"

    @property
    def mb_factor(self) -> float:
        """Multiplier taking a value of this parameter to MB (1 when unitless)."""
        return _TO_MB.get(self.unit or "", 1.0)

    @property
    def n_steps(self) -> int | None:
        if self.is_bool or self.step is None:
            return None
        return int(math.floor((self.upper - self.lower) / self.step + _EPS))


@dataclass(frozen=True)
class ResourceConstraint:
    kind: str
    terms: tuple[str, ...]
    bound: float
    bound_ref: str | None = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise SpaceError(f"unknown constraint kind {self.kind!r}")
        if not self.terms:
            raise SpaceError("constraint needs at least one term")
        if not self.bound > 0:
            raise SpaceError(f"constraint bound must be > 0, got {self.bound}")

    def describe(self) -> str:
        op = "+" if self.kind == "sum-le" else "*"
        return f"{self.kind}({op.join(self.terms)})"


@dataclass(frozen=True)
class Configuration:
    values: tuple

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


@dataclass(frozen=True)
class ParamSpace:
    params: tuple[ParamDef, ...]
    constraints: tuple[ResourceConstraint, ...] = ()
    cluster: dict = field(default_factory=dict, compare=False, hash=False)
    name: str = ""

    def __post_init__(self):
        if len(self.params) < 1:
            raise SpaceError("space needs at least one parameter")
        names = [p.name for p in self.params]
        seen = set()
        for n in names:
            if n in seen:
                raise SpaceError(f"duplicate parameter name {n!r}")
            seen.add(n)
        for c in self.constraints:
            for t in c.terms:
                if t not in seen:
                    raise SpaceError(f"constraint {c.describe()}: unknown parameter {t!r}")

    @property
    def k(self) -> int:
        return len(self.params)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def index(self, name: str) -> int:
        for i, p in enumerate(self.params):
            if p.name == name:
                return i
        raise KeyError(name)

    def default_config(self) -> Configuration:
        return Configuration(tuple(p.default for p in self.params))

    def digest(self) -> str:
        """Stable content hash, used to refuse resuming against a changed space."""
        blob = json.dumps(space_to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # ---- vectorized helpers over value matrices (rows = configurations) ----

    @property
    def _lowers(self) -> np.ndarray:
        return np.array([0.0 if p.is_bool else p.lower for p in self.params])

    @property
    def _spans(self) -> np.ndarray:
        return np.array([1.0 if p.is_bool else (p.upper - p.lower) for p in self.params])

    def as_matrix(self, configs: Sequence[Configuration]) -> np.ndarray:
        return np.array([[float(v) for v in c.values] for c in configs], dtype=float).reshape(
            len(configs), self.k
        )

    def from_row(self, row: Sequence[float]) -> Configuration:
        vals = []
        for p, v in zip(self.params, row):
            if p.is_bool:
                vals.append(bool(v >= 0.5))
            elif p.kind == "numeric-int":
                vals.append(int(round(v)))
            else:
                vals.append(round(float(v), 10))
        return Configuration(tuple(vals))

    def normalize_matrix(self, V: np.ndarray) -> np.ndarray:
        spans = self._spans
        safe = np.where(spans > 0, spans, 1.0)
        U = (V - self._lowers) / safe
        U[:, spans == 0] = 0.0
        return U

    def snap_matrix(self, V: np.ndarray, mode: str = "nearest") -> np.ndarray:
        """Snap a value matrix onto the step grids; ties go to the lower grid point."""
        V = V.copy()
        for j, p in enumerate(self.params):
            if p.is_bool:
                V[:, j] = (V[:, j] >= 0.5).astype(float)
                continue
            col = np.clip(V[:, j], p.lower, p.upper)
            if p.step is not None:
                s = (col - p.lower) / p.step
                if mode == "nearest":
                    g = np.ceil(s - 0.5 - _EPS)
                else:
                    g = np.floor(s + _EPS)
                g = np.clip(g, 0, p.n_steps)
                col = p.lower + g * p.step
                if p.kind == "numeric-real":
                    col = np.round(col, 10)
            V[:, j] = col
        return V

    def denormalize_matrix(self, U: np.ndarray) -> np.ndarray:
        V = self._lowers + U * self._spans
        return self.snap_matrix(V)


def _resolve_bound(raw, cluster: dict) -> tuple[float, str | None]:
    if isinstance(raw, str):
        key = raw.removeprefix("cluster.")
        if key not in cluster:
            raise SpaceError(f"constraint bound references unknown cluster field {raw!r}")
        return float(cluster[key]), raw
    return float(raw), None


def space_from_dict(doc: dict) -> ParamSpace:
    if not isinstance(doc, dict) or "params" not in doc:
        raise SpaceError("space document needs a top-level 'params' array")
    cluster = dict(doc.get("cluster") or {})
    params = []
    for i, raw in enumerate(doc["params"]):
        try:
            name = raw["name"]
            kind = raw["kind"]
        except (KeyError, TypeError):
            raise SpaceError(f"params[{i}]: missing 'name' or 'kind'") from None
        known = {"name", "kind", "lower", "upper", "step", "default", "resource_class", "unit"}
        extra = {k: v for k, v in raw.items() if k not in known}
        if kind == "boolean":
            params.append(
                ParamDef(
                    name,
                    kind,
                    default=bool(raw.get("default", False)),
                    resource_class=raw.get("resource_class") or "none",
                    extra=extra,
                )
            )
            continue
        try:
            lower, upper = raw["lower"], raw["upper"]
        except KeyError:
            raise SpaceError(f"params[{i}] {name}: numeric kind needs lower/upper") from None
        params.append(
            ParamDef(
                name,
                kind,
                lower=lower,
                upper=upper,
                step=raw.get("step"),
                default=raw.get("default", lower),
                resource_class=raw.get("resource_class") or "none",
                unit=raw.get("unit"),
                extra=extra,
            )
        )
    constraints = []
    for i, raw in enumerate(doc.get("constraints") or []):
        try:
            bound, ref = _resolve_bound(raw["bound"], cluster)
            constraints.append(ResourceConstraint(raw["kind"], tuple(raw["terms"]), bound, ref))
        except KeyError as e:
            raise SpaceError(f"constraints[{i}]: missing field {e}") from None
    return ParamSpace(tuple(params), tuple(constraints), cluster, doc.get("name", ""))


def space_to_dict(space: ParamSpace) -> dict:
    params = []
    for p in space.params:
        d = {"name": p.name, "kind": p.kind}
        if not p.is_bool:
            d.update(lower=p.lower, upper=p.upper, step=p.step)
        d["default"] = p.default
        if p.unit:
            d["unit"] = p.unit
        d["resource_class"] = p.resource_class
        d.update(p.extra)
        params.append(d)
    constraints = [
        {"kind": c.kind, "terms": list(c.terms), "bound": c.bound_ref or c.bound}
        for c in space.constraints
    ]
    return {
        "name": space.name,
        "params": params,
        "constraints": constraints,
        "cluster": dict(space.cluster),
    }


def load_space(source: str | Path) -> ParamSpace:
    """Load a space from a JSON document path or a JSON string.

    Parse errors are reported with line and column context.
    """
    text = str(source)
    if not text.lstrip().startswith("{"):
        text = Path(source).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpaceError(f"parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return space_from_dict(doc)


def bundled_space(name: str) -> ParamSpace:
    """Load one of the shipped spaces, e.g. ``"table2_range_a"``."""
    ref = resources.files("sqltune") / "spaces" / f"{name}.json"
    return load_space(ref.read_text())


def bundled_space_path(name: str) -> Path:
    return Path(str(resources.files("sqltune") / "spaces" / f"{name}.json"))


def _constraint_value(space: ParamSpace, c: ResourceConstraint, V: np.ndarray) -> np.ndarray:
    idx = [space.index(t) for t in c.terms]
    cols = np.stack([V[:, j] * space.params[j].mb_factor for j in idx], axis=1)
    return cols.sum(axis=1) if c.kind == "sum-le" else cols.prod(axis=1)


def validate(space: ParamSpace, config: Configuration) -> list[str]:
    """Return human-readable violations; empty iff the configuration is valid."""
    if len(config.values) != space.k:
        raise ValueError(f"configuration has {len(config.values)} values, space has k={space.k}")
    out = []
    for p, v in zip(space.params, config.values):
        if p.is_bool:
            if not isinstance(v, (bool, np.bool_)) and v not in (0, 1):
                out.append(f"{p.name}: {v!r} is not boolean")
            continue
        if not p.lower - _EPS <= v <= p.upper + _EPS:
            out.append(f"{p.name}: {v} outside range [{p.lower}, {p.upper}]")
            continue
        if p.step is not None:
            s = (v - p.lower) / p.step
            if abs(s - round(s)) > 1e-6:
                out.append(f"{p.name}: {v} not on step grid {p.step} from {p.lower}")
    if out:
        return out
    V = space.as_matrix([config])
    for c in space.constraints:
        val = float(_constraint_value(space, c, V)[0])
        if val > c.bound * (1 + 1e-12):
            out.append(f"{c.describe()}: {val:g} exceeds bound {c.bound:g}")
    return out


def _check_length(space: ParamSpace, n: int):
    if n != space.k:
        raise ValueError(f"expected {space.k} values, got {n}")


def normalize(space: ParamSpace, config: Configuration) -> np.ndarray:
    _check_length(space, len(config.values))
    problems = validate(space, config)
    if problems:
        raise ValueError("invalid configuration: " + "; ".join(problems))
    return space.normalize_matrix(space.as_matrix([config]))[0]


def denormalize(space: ParamSpace, u: Sequence[float]) -> Configuration:
    u = np.asarray(u, dtype=float)
    _check_length(space, u.shape[0])
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("unit-vector components must lie in [0, 1]")
    return space.from_row(space.denormalize_matrix(u[None, :])[0])


def repair_matrix(space: ParamSpace, V: np.ndarray, max_rounds: int = 20) -> np.ndarray:
    """Shrink constrained terms until every resource constraint holds.

    Sum constraints remove the excess from each term in proportion to its
    headroom above the lower bound. Product constraints do the same in log
    space. Values are re-snapped downward so a repaired row stays feasible.
    """
    V = V.copy()
    for c in space.constraints:
        idx = [space.index(t) for t in c.terms]
        lows = np.array([space.params[j].lower * space.params[j].mb_factor for j in idx])
        if c.kind == "sum-le":
            floor_val = lows.sum()
        else:
            lows = np.array(
                [
                    max(space.params[j].lower, space.params[j].step or 1.0) * space.params[j].mb_factor
                    for j in idx
                ]
            )
            floor_val = lows.prod()
        if floor_val > c.bound * (1 + 1e-12):
            raise InfeasibleSpaceError(
                f"{c.describe()}: lower bounds alone give {floor_val:g} > {c.bound:g}"
            )
    for _ in range(max_rounds):
        dirty = False
        for c in space.constraints:
            idx = [space.index(t) for t in c.terms]
            f = np.array([space.params[j].mb_factor for j in idx])
            vals = _constraint_value(space, c, V)
            bad = vals > c.bound * (1 + 1e-12)
            if not bad.any():
                continue
            dirty = True
            X = V[np.ix_(bad, idx)] * f
            if c.kind == "sum-le":
                lows = np.array([space.params[j].lower for j in idx]) * f
                head = np.maximum(X - lows, 0.0)
                excess = X.sum(axis=1) - c.bound
                share = head / np.maximum(head.sum(axis=1, keepdims=True), 1e-300)
                X = X - excess[:, None] * share
            else:
                lows = np.array([max(space.params[j].lower, space.params[j].step or 1.0) for j in idx]) * f
                X = np.maximum(X, lows)
                head = np.log(X / lows)
                excess = np.log(X).sum(axis=1) - math.log(c.bound)
                share = head / np.maximum(head.sum(axis=1, keepdims=True), 1e-300)
                X = np.exp(np.log(X) - excess[:, None] * share)
            sub = V[bad].copy()
            sub[:, idx] = X / f
            V[bad] = space.snap_matrix(sub, mode="floor")
        if not dirty:
            return V
    bad_rows = [i for i in range(V.shape[0]) if validate(space, space.from_row(V[i]))]
    if bad_rows:
        raise InfeasibleSpaceError(f"constraint repair did not converge for {len(bad_rows)} rows")
    return V


def latin_hypercube(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified unit samples: every column has exactly one point per 1/n bin."""
    U = np.empty((n, k))
    for j in range(k):
        U[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return U


def lhs_sample(space: ParamSpace, n: int, seed: int) -> list[Configuration]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    U = latin_hypercube(n, space.k, rng)
    V = repair_matrix(space, space.denormalize_matrix(U))
    return [space.from_row(row) for row in V]


def probe_range(
    space: ParamSpace,
    param: str,
    step: float,
    max_tries: int,
    runner: Callable[[float], bool],
) -> tuple[float, float]:
    """Empirically bound a non-resource parameter around its default.

    ``runner(value)`` runs the workload with only ``param`` overridden and
    returns True on success. Probing walks ``default +/- N*step``; the first
    failing multiplier N sets the bound to ``default +/- (N-1)*step``. Probes
    never leave the declared range, and results are clamped to it.
    """
    p = space.params[space.index(param)]
    if p.is_bool:
        raise ValueError(f"{param} is boolean; nothing to probe")
    if step <= 0:
        raise ValueError("step must be > 0")
    dv = p.default
    if not runner(dv):
        raise DefaultInfeasibleError(f"{param}: workload fails at default value {dv}")

    def walk(sign: int, limit: float) -> float:
        for n in range(1, max_tries + 1):
            v = dv + sign * n * step
            if (sign > 0 and v > limit) or (sign < 0 and v < limit):
                return limit
            if not runner(v):
                return dv + sign * (n - 1) * step
        return dv + sign * max_tries * step

    upper = min(walk(+1, p.upper), p.upper)
    lower = max(walk(-1, p.lower), p.lower)
    return lower, upper
