"""Command-line interface.

Subcommands: ``tune``, ``analyze qcsa``, ``analyze iicp``, ``suggest``,
``report`` and ``make-synth``. Results go to stdout or the declared output
files; diagnostics go to stderr. Exit status is 0 on success, 1 on usage
errors and 2 on runtime errors. ``LOCAT_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .executor import (
    BackendError,
    CommandBackend,
    SyntheticBackend,
    app_to_dict,
    load_app,
    make_synthetic_app,
    synth_known_optimum,
)
from .pipeline import (
    Budgets,
    HistoryFragment,
    HistoryMismatch,
    RecordedBackend,
    TuningAborted,
    TuningSession,
    config_dict,
    load_history,
    next_action,
    report,
    session_from_history,
    tune,
)
from .qcsa import classify, query_time_matrix
from .space import SpaceError, bundled_space_path, load_space

log = logging.getLogger("sqltune")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _space_path(raw: str) -> Path:
    p = Path(raw)
    if p.exists():
        return p
    # fall back to a bundled space by file or base name
    name = p.name[:-5] if p.name.endswith(".json") else p.name
    bundled = bundled_space_path(name)
    if bundled.exists():
        return bundled
    raise UsageError(f"space file not found: {raw}")


def _datasizes(raw: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad --datasize value: {raw!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise UsageError("--datasize values must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sqltune", description="Configuration tuning for multi-query SQL workloads")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("tune", help="run or resume a tuning session")
    t.add_argument("--space", required=True, help="parameter-space JSON file or bundled space name")
    backend = t.add_mutually_exclusive_group(required=True)
    backend.add_argument("--synth", metavar="PATH", help="synthetic app file (see make-synth)")
    backend.add_argument("--exec", metavar="CMD", dest="exec_cmd", help="external command template")
    t.add_argument("--queries", help="comma-separated query ids for --exec (discovered when omitted)")
    t.add_argument("--datasize", default="100", help="datasize in GB, or a comma list for round-robin")
    t.add_argument("--n-qcsa", type=int, default=30)
    t.add_argument("--n-iicp", type=int, default=20)
    t.add_argument("--lhs-start", type=int, default=3)
    t.add_argument("--max-trials", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--history", help="history file (default: OUT/history.jsonl)")
    t.add_argument("--out", default=".", help="output directory for history and report")
    t.add_argument("--no-reduce", action="store_true", help="plain full-space BO (no query or parameter reduction)")
    t.add_argument("--no-stop", action="store_true", help="ignore the EI stop rule and run to --max-trials")
    t.add_argument("--timeout", type=float, help="per-trial wall limit in seconds for --exec")

    a = sub.add_parser("analyze", help="offline analyses over a history file")
    asub = a.add_subparsers(dest="analysis", parser_class=_Parser)
    q = asub.add_parser("qcsa", help="query sensitivity table")
    q.add_argument("--history", required=True)
    q.add_argument("--chart", help="write query id, CV and label as CSV")
    i = asub.add_parser("iicp", help="parameter importance and KPCA summary")
    i.add_argument("--history", required=True)
    i.add_argument("--space", required=True)

    s = sub.add_parser("suggest", help="print the next configuration without executing it")
    s.add_argument("--history", required=True)
    s.add_argument("--space", required=True)
    s.add_argument("--seed", type=int, help="override the history's seed")
    s.add_argument("--format", choices=("properties", "json"), default="properties")

    r = sub.add_parser("report", help="emit the structured report for a history")
    r.add_argument("--history", required=True)
    r.add_argument("--space", required=True)
    r.add_argument("--out", help="write report.json into this directory instead of stdout")

    m = sub.add_parser("make-synth", help="write a seeded synthetic app with a known optimum")
    m.add_argument("--space", required=True)
    m.add_argument("--out", required=True, help="app file to write")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--queries", type=int, default=40)
    m.add_argument("--sensitive", type=int, default=10)
    m.add_argument("--important", type=int, default=5)
    m.add_argument("--amplitude", type=float, default=2.5)
    m.add_argument("--noise-cv", type=float, default=0.02)
    return parser


def _dump(obj, stream=None):
    stream = stream or sys.stdout
    json.dump(obj, stream, indent=2, sort_keys=False, default=_jsonable)
    stream.write("\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _load(history: str) -> tuple[HistoryFragment, list[str]]:
    frag = load_history(history)
    if frag is None or not any(t.ok for t in frag.records):
        raise RuntimeError("no ok trials")
    ids = frag.header.get("query_ids") or []
    if not ids:
        m = max(len(t.queries) for t in frag.records if t.ok)
        ids = [f"q{i + 1:02d}" for i in range(m)]
    return frag, list(ids)


def _offline_session(history: str, space_arg: str) -> TuningSession:
    frag, ids = _load(history)
    space = load_space(_space_path(space_arg))
    return session_from_history(frag, space, RecordedBackend(ids))


def cmd_tune(args) -> int:
    datasizes = _datasizes(args.datasize)
    if min(args.n_qcsa, args.n_iicp, args.lhs_start) < 1 or args.max_trials < 2:
        raise UsageError("budgets must be positive and --max-trials at least 2")
    budgets = Budgets(args.n_qcsa, args.n_iicp, args.lhs_start, args.max_trials)
    space = load_space(_space_path(args.space))
    if args.synth:
        backend = SyntheticBackend(load_app(args.synth, space))
    else:
        ids = [s for s in args.queries.split(",") if s] if args.queries else None
        backend = CommandBackend(args.exec_cmd, space, ids, args.timeout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = Path(args.history) if args.history else out / "history.jsonl"
    session = TuningSession(
        space,
        backend,
        datasizes=datasizes,
        budgets=budgets,
        seed=args.seed,
        reduce=not args.no_reduce,
        stop_rule=not args.no_stop,
    )
    try:
        _, rep = tune(session, history)
    except TuningAborted as e:
        print(f"error: {e}; partial history kept in {history}", file=sys.stderr)
        return 2
    with open(out / "report.json", "w") as f:
        _dump(rep, f)
    _dump({"best": rep["best"], "trials": rep["trials"], "history": str(history), "report": str(out / "report.json")})
    return 0


def cmd_analyze_qcsa(args) -> int:
    # sensitivity analysis reads durations only, so no space file is needed
    frag, ids = _load(args.history)
    n_qcsa = frag.header.get("budgets", {}).get("n_qcsa", 30)
    full = [t for t in frag.records if t.ok and len(t.queries) == len(ids) and t.phase != "validation"]
    if len(full) < 2:
        raise RuntimeError("need at least 2 ok full-workload trials for sensitivity analysis")
    doc = classify(query_time_matrix(full[:n_qcsa], len(ids)), ids).to_dict()
    if args.chart:
        with open(args.chart, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query", "cv", "label"])
            for row in doc["queries"]:
                w.writerow([row["id"], f"{row['cv']:.6g}", row["label"]])
    _dump(doc)
    return 0


def cmd_analyze_iicp(args) -> int:
    session = _offline_session(args.history, args.space)
    a = session.analysis()
    if a is None or a.cps is None:
        raise RuntimeError(f"need {session.budgets.n_qcsa} ok full-workload trials for parameter identification")
    rep = report(session)
    doc = {"cps": rep["cps"], "cpe": rep.get("cpe")}
    _dump(doc)
    return 0


def cmd_suggest(args) -> int:
    session = _offline_session(args.history, args.space)
    if args.seed is not None:
        session.seed = args.seed
    phase, config, queries, prop = next_action(session)
    if phase == "done":
        raise RuntimeError("session already finished")
    if args.format == "json":
        ids = session.backend.query_ids
        _dump(
            {
                "phase": phase,
                "trial_index": len(session.history),
                "datasize": session.target_datasize if phase == "validation" else session.datasize_for(len(session.history)),
                "queries": [ids[i] for i in queries] if queries is not None else list(ids),
                "config": config_dict(session.space, config),
                "expected_improvement": prop.max_ei if prop else None,
            }
        )
    else:
        for p, v in zip(session.space.params, config.values):
            print(f"{p.name}={'true' if v is True else 'false' if v is False else v}")
    return 0


def cmd_report(args) -> int:
    session = _offline_session(args.history, args.space)
    rep = report(session)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as f:
            _dump(rep, f)
    else:
        _dump(rep)
    return 0


def cmd_make_synth(args) -> int:
    space = load_space(_space_path(args.space))
    if not 0 <= args.sensitive <= args.queries:
        raise UsageError("--sensitive must be between 0 and --queries")
    app = make_synthetic_app(
        space,
        n_queries=args.queries,
        n_sensitive=args.sensitive,
        important=args.important,
        seed=args.seed,
        amplitude=args.amplitude,
        noise_cv=args.noise_cv,
    )
    opt, total = synth_known_optimum(app)
    important = sorted({e.params[0] for q in app.queries for e in q.effects})
    truth = {
        "sensitive_queries": [app.ids[i] for i in app.sensitive_queries],
        "important_params": [space.names[j] for j in important],
        "optimum": config_dict(space, opt),
        "optimum_seconds": total,
        "optimum_datasize": app.ds_ref,
    }
    Path(args.out).write_text(json.dumps(app_to_dict(app, truth), indent=2) + "\n")
    return 0


COMMANDS = {
    "tune": cmd_tune,
    "suggest": cmd_suggest,
    "report": cmd_report,
    "make-synth": cmd_make_synth,
}


def _setup_logging():
    level = os.environ.get("LOCAT_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if args.command == "analyze":
            if args.analysis is None:
                raise UsageError("analyze needs a subcommand: qcsa or iicp")
            fn = cmd_analyze_qcsa if args.analysis == "qcsa" else cmd_analyze_iicp
        else:
            fn = COMMANDS[args.command]
        return fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (HistoryMismatch, SpaceError, BackendError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
