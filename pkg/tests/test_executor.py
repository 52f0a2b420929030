import json
import sys
import textwrap

import numpy as np
import pytest

from sqltune.executor import (
    BackendError,
    CommandBackend,
    Effect,
    MalformedResultError,
    SyntheticApp,
    SyntheticBackend,
    SyntheticQuery,
    TrialRecord,
    UnsupportedOracleError,
    app_from_dict,
    app_to_dict,
    make_synthetic_app,
    run_trial,
    synth_eval,
    synth_known_optimum,
)
from sqltune.space import Configuration, bundled_space, lhs_sample, load_space, normalize, validate


@pytest.fixture(scope="module")
def space():
    return bundled_space("table2_range_a")


@pytest.fixture(scope="module")
def app(space):
    return make_synthetic_app(space, seed=7)


def test_trial_record_round_trip(space):
    c = space.default_config()
    t = TrialRecord(c, 100.0, (1.5, 2.5), 4.0, "rqa-bo", "ok", 9, (3, 7))
    assert TrialRecord.from_dict(json.loads(json.dumps(t.to_dict()))) == t


def test_run_trial_deterministic(space, app):
    c = lhs_sample(space, 1, 0)[0]
    a = run_trial(SyntheticBackend(app), c, 100.0, phase="warmup", trial_index=4)
    b = run_trial(SyntheticBackend(app), c, 100.0, phase="warmup", trial_index=4)
    assert a == b
    assert a.ok and a.total_time == pytest.approx(sum(a.query_times), rel=1e-9)


def test_run_trial_subset(space, app):
    c = space.default_config()
    r = run_trial(SyntheticBackend(app), c, 100.0, [2, 5], phase="rqa-bo", trial_index=1)
    assert len(r.query_times) == 2
    assert r.queries == (2, 5)


def test_subset_matches_full_run(space, app):
    c = lhs_sample(space, 1, 3)[0]
    full = run_trial(SyntheticBackend(app), c, 100.0, phase="qcsa-bo", trial_index=11)
    sub = run_trial(SyntheticBackend(app), c, 100.0, [1, 4, 30], phase="rqa-bo", trial_index=11)
    assert sub.query_times == tuple(full.query_times[i] for i in (1, 4, 30))


def test_run_trial_rejects_bad_input(space, app):
    be = SyntheticBackend(app)
    with pytest.raises(ValueError):
        run_trial(be, space.default_config(), 0.0)
    with pytest.raises(ValueError):
        run_trial(be, space.default_config(), 10.0, [99])
    with pytest.raises(ValueError):
        run_trial(be, space.default_config(), 10.0, phase="bogus")


def _tiny_app(space, noise=0.0):
    j = space.index("spark.executor.cores")
    q_flat = SyntheticQuery(10.0, 1.0, 0.0, noise)
    q_sens = SyntheticQuery(5.0, 1.0, 2.0, noise, (Effect("bowl", (j,), 1.0, 0.5),))
    return SyntheticApp(space, (q_flat, q_sens), 100.0, 1)


def test_insensitive_query_flat(space):
    app = _tiny_app(space)
    a, b = lhs_sample(space, 2, 5)
    assert synth_eval(app, a, 100.0, 0)[0] == synth_eval(app, b, 100.0, 3)[0] == 10.0


def test_datasize_power_law(space):
    app = _tiny_app(space)
    c = space.default_config()
    t1 = synth_eval(app, c, 100.0, 0)
    t2 = synth_eval(app, c, 200.0, 0)
    assert t2 == pytest.approx([2 * v for v in t1], rel=1e-15)


def test_noise_cv_converges(space):
    app = _tiny_app(space, noise=0.1)
    c = space.default_config()
    v = np.array([synth_eval(app, c, 100.0, t)[0] for t in range(1000)])
    cv = v.std() / v.mean()
    assert abs(cv - 0.1) / 0.1 < 0.2


def test_known_optimum_beats_probes(space, app):
    opt, total = synth_known_optimum(app)
    assert validate(space, opt) == []
    U = np.array([normalize(space, c) for c in lhs_sample(space, 1000, 1)])
    assert total <= app.expected_total(U, 100.0).min() + 1e-9


def test_known_optimum_flat_app(space):
    app = SyntheticApp(space, (SyntheticQuery(10.0, 1.0), SyntheticQuery(20.0, 2.0)), 100.0)
    _, total = synth_known_optimum(app, 200.0)
    assert total == pytest.approx(10.0 * 2 + 20.0 * 4)


def test_known_optimum_bowl_center(space):
    app = _tiny_app(space)
    opt, _ = synth_known_optimum(app)
    j = space.index("spark.executor.cores")
    # cores 1..8: 0.5 normalized is 4.5, tie snaps down
    assert opt.values[j] in (4, 5)
    assert normalize(space, opt)[j] == pytest.approx(0.5, abs=1 / 14 + 1e-9)


def test_known_optimum_separable_brute_force():
    doc = {
        "params": [
            {"name": "a", "kind": "numeric-int", "lower": 0, "upper": 10, "step": 1, "default": 0},
            {"name": "b", "kind": "numeric-int", "lower": 0, "upper": 10, "step": 1, "default": 0},
        ]
    }
    space = load_space(json.dumps(doc))
    qs = (
        SyntheticQuery(3.0, 1.0, 1.0, 0.0, (Effect("bowl", (0,), 1.0, 0.33),)),
        SyntheticQuery(4.0, 1.0, 2.0, 0.0, (Effect("bowl", (1,), 1.0, 0.76),)),
    )
    app = SyntheticApp(space, qs)
    opt, total = synth_known_optimum(app)
    grid = [(a, b) for a in range(11) for b in range(11)]
    U = np.array([normalize(space, Configuration(g)) for g in grid])
    tot = app.expected_total(U, 100.0)
    assert total == pytest.approx(tot.min())
    assert opt.values == grid[int(np.argmin(tot))]


def test_known_optimum_unsupported(space):
    j = space.index("spark.executor.cores")
    q = SyntheticQuery(5.0, 1.0, 1.0, 0.0, (Effect("linear", (j,), 1.0),))
    with pytest.raises(UnsupportedOracleError):
        synth_known_optimum(SyntheticApp(space, (q,)))


def test_generated_app_shape(space, app):
    assert app.m == 40
    assert len(app.sensitive_queries) == 10
    params = {e.params[0] for q in app.queries for e in q.effects}
    assert len(params) == 5


def test_app_dict_round_trip(space, app):
    doc = json.loads(json.dumps(app_to_dict(app)))
    assert app_from_dict(doc, space) == SyntheticApp(space, app.queries, app.ds_ref, app.seed, app.ids)


def test_app_digest_mismatch(space, app):
    other = bundled_space("table2_range_b")
    with pytest.raises(ValueError):
        app_from_dict(app_to_dict(app), other)


def _script(tmp_path, body):
    p = tmp_path / "runner.py"
    p.write_text(textwrap.dedent(body))
    return f"{sys.executable} {p} {{CONFIG_FILE}} {{DATASIZE_GB}} {{QUERY_LIST}} {{OUTPUT_FILE}}"


RUNNER = """
import json, sys
cfg, ds, qlist, out = sys.argv[1:5]
conf = dict(line.split("=", 1) for line in open(cfg).read().splitlines())
ids = ["q1", "q2", "q3"] if qlist == "all" else qlist.split(",")
skip = {skip!r}
rows = [{{"id": q, "seconds": float(ds) * (i + 1)}} for i, q in enumerate(ids) if q != skip]
json.dump({{"queries": rows}}, open(out, "w"))
"""


def test_command_backend_discovers_ids(tmp_path, space):
    be = CommandBackend(_script(tmp_path, RUNNER.format(skip=None)), space)
    r = run_trial(be, space.default_config(), 2.0, phase="warmup")
    assert be.query_ids == ("q1", "q2", "q3")
    assert r.query_times == (2.0, 4.0, 6.0)
    sub = run_trial(be, space.default_config(), 1.0, [2], phase="rqa-bo")
    assert sub.query_times == (1.0,)


def test_command_backend_missing_query(tmp_path, space):
    be = CommandBackend(_script(tmp_path, RUNNER.format(skip="q2")), space, query_ids=["q1", "q2", "q3"])
    with pytest.raises(MalformedResultError):
        run_trial(be, space.default_config(), 1.0)


def test_command_backend_nonzero_exit_is_failed(tmp_path, space):
    be = CommandBackend(_script(tmp_path, "import sys; sys.exit(3)"), space, query_ids=["q1"])
    r = run_trial(be, space.default_config(), 1.0)
    assert r.status == "failed" and r.query_times == ()


def test_command_backend_timeout(tmp_path, space):
    be = CommandBackend(_script(tmp_path, "import time; time.sleep(5)"), space, query_ids=["q1"], timeout=0.2)
    assert run_trial(be, space.default_config(), 1.0).status == "timeout"


def test_command_backend_not_found(space):
    be = CommandBackend("/nonexistent/sqltune-runner {OUTPUT_FILE}", space, query_ids=["q1"])
    with pytest.raises(BackendError):
        run_trial(be, space.default_config(), 1.0)


def test_command_backend_config_file_format(tmp_path, space):
    body = """
    import json, shutil, sys
    shutil.copy(sys.argv[1], {dest!r})
    json.dump({{"queries": [{{"id": "q1", "seconds": 1}}]}}, open(sys.argv[4], "w"))
    """.format(dest=str(tmp_path / "seen.properties"))
    be = CommandBackend(_script(tmp_path, body), space, query_ids=["q1"])
    run_trial(be, space.default_config(), 1.0)
    lines = (tmp_path / "seen.properties").read_text().splitlines()
    assert len(lines) == space.k
    assert lines[0].startswith(space.names[0] + "=")
    assert any(line.endswith("=true") or line.endswith("=false") for line in lines)


def test_default_timeout_floor(space):
    be = CommandBackend("true", space, query_ids=["q1"])
    assert be.current_timeout() == 600.0
    be.longest_ok = 500.0
    assert be.current_timeout() == 1500.0
