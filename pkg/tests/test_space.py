import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqltune.space import (
    Configuration,
    DefaultInfeasibleError,
    InfeasibleSpaceError,
    SpaceError,
    bundled_space,
    denormalize,
    latin_hypercube,
    lhs_sample,
    load_space,
    normalize,
    probe_range,
    validate,
)


@pytest.fixture(scope="module")
def range_a():
    return bundled_space("table2_range_a")


@pytest.fixture(scope="module")
def range_b():
    return bundled_space("table2_range_b")


def with_values(space, **overrides):
    vals = list(space.default_config().values)
    for name, v in overrides.items():
        vals[space.index(name.replace("__", "."))] = v
    return Configuration(tuple(vals))


def test_range_a_loads(range_a):
    assert range_a.k == 38
    p = range_a.params[range_a.index("spark.executor.cores")]
    assert (p.lower, p.upper) == (1, 8)


def test_minimal_boolean_space():
    sp = load_space('{"params": [{"name": "flag", "kind": "boolean", "default": true}]}')
    assert sp.k == 1
    assert sp.constraints == ()


def test_unknown_constraint_term():
    doc = {
        "params": [{"name": "a", "kind": "numeric-int", "lower": 1, "upper": 4, "step": 1, "default": 1}],
        "constraints": [{"kind": "sum-le", "terms": ["a", "b"], "bound": 5}],
    }
    with pytest.raises(SpaceError, match="unknown parameter"):
        load_space(json.dumps(doc))


def test_parse_error_has_line_context():
    with pytest.raises(SpaceError, match="line 3"):
        load_space('{\n "params": [\n  {"name": }\n ]\n}')


def test_duplicate_name():
    doc = {"params": [{"name": "a", "kind": "boolean"}, {"name": "a", "kind": "boolean"}]}
    with pytest.raises(SpaceError, match="duplicate"):
        load_space(json.dumps(doc))


def test_lower_above_upper():
    doc = {"params": [{"name": "a", "kind": "numeric-int", "lower": 5, "upper": 4, "step": 1, "default": 4}]}
    with pytest.raises(SpaceError, match="range violation"):
        load_space(json.dumps(doc))


def test_defaults_are_valid(range_a, range_b):
    assert validate(range_a, range_a.default_config()) == []
    assert validate(range_b, range_b.default_config()) == []


def test_memory_sum_violation(range_b):
    # 32 GB heap + 32768 MB overhead + 32768 MB off-heap = 98304 MB > 49152 MB
    cfg = with_values(
        range_b,
        **{
            "spark.executor.memory": 32,
            "spark.executor.memoryOverhead": 32768,
            "spark.memory.offHeap.size": 32768,
        },
    )
    problems = validate(range_b, cfg)
    assert len(problems) == 1
    assert "sum-le" in problems[0] and "98304" in problems[0]


def test_cores_out_of_range(range_a):
    problems = validate(range_a, with_values(range_a, **{"spark.executor.cores": 9}))
    assert len(problems) == 1
    assert "spark.executor.cores" in problems[0]


def test_validate_length_mismatch(range_a):
    with pytest.raises(ValueError):
        validate(range_a, Configuration((1, 2)))


def test_normalize_endpoints_and_affine(range_a):
    j = range_a.index("spark.executor.cores")
    u = normalize(range_a, with_values(range_a, **{"spark.executor.cores": 1}))
    assert u[j] == 0.0
    u = normalize(range_a, with_values(range_a, **{"spark.executor.cores": 8}))
    assert u[j] == 1.0
    u = normalize(range_a, with_values(range_a, **{"spark.executor.cores": 4}))
    assert u[j] == pytest.approx(3 / 7)


def test_denormalize_zeros(range_a):
    c = denormalize(range_a, np.zeros(range_a.k))
    for p, v in zip(range_a.params, c.values):
        assert v == (False if p.is_bool else p.lower)


def test_denormalize_tie_snaps_down():
    sp = load_space(
        '{"params": [{"name": "c", "kind": "numeric-int", "lower": 1, "upper": 8, "step": 1, "default": 1}]}'
    )
    assert denormalize(sp, [0.5]).values == (4,)


def test_denormalize_rejects_outside_unit(range_a):
    u = np.zeros(range_a.k)
    u[0] = 1.2
    with pytest.raises(ValueError):
        denormalize(range_a, u)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_round_trip_on_grid(seed):
    space = bundled_space("table2_range_a")
    c = lhs_sample(space, 1, seed)[0]
    assert denormalize(space, normalize(space, c)) == c


def test_lhs_single_sample_in_range(range_a):
    (c,) = lhs_sample(range_a, 1, 3)
    assert validate(range_a, c) == []


def test_lhs_strata_brute_force():
    rng = np.random.default_rng(11)
    U = latin_hypercube(10, 2, rng)
    for j in range(2):
        bins = sorted(int(u * 10) for u in U[:, j])
        assert bins == list(range(10))


def test_lhs_deterministic(range_a):
    assert lhs_sample(range_a, 8, 42) == lhs_sample(range_a, 8, 42)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_lhs_always_valid(n, seed):
    space = bundled_space("table2_range_a")
    for c in lhs_sample(space, n, seed):
        assert validate(space, c) == []


def test_lhs_infeasible():
    doc = {
        "params": [
            {"name": "a", "kind": "numeric-int", "lower": 4, "upper": 8, "step": 1, "default": 4},
            {"name": "b", "kind": "numeric-int", "lower": 4, "upper": 8, "step": 1, "default": 4},
        ],
        "constraints": [{"kind": "sum-le", "terms": ["a", "b"], "bound": 6}],
    }
    with pytest.raises(InfeasibleSpaceError):
        lhs_sample(load_space(json.dumps(doc)), 4, 0)


def test_validate_is_pure(range_a):
    c = with_values(range_a, **{"spark.executor.cores": 9})
    assert validate(range_a, c) == validate(range_a, c)


PROBE_DOC = {
    "params": [
        {"name": "x", "kind": "numeric-int", "lower": 0, "upper": 8, "step": 1, "default": 4},
        {"name": "buf", "kind": "numeric-int", "lower": 0, "upper": 1024, "step": 1, "default": 64},
    ]
}


def test_probe_no_failure_clamps():
    sp = load_space(json.dumps(PROBE_DOC))
    assert probe_range(sp, "x", 2, 3, lambda v: True) == (0, 8)


def test_probe_upper_from_first_failure():
    sp = load_space(json.dumps(PROBE_DOC))
    lo, hi = probe_range(sp, "buf", 32, 5, lambda v: v < 64 + 3 * 32)
    assert hi == 128
    assert lo == 0


def test_probe_lower_first_step_fails():
    sp = load_space(json.dumps(PROBE_DOC))
    lo, _ = probe_range(sp, "buf", 32, 5, lambda v: v >= 64)
    assert lo == 64


def test_probe_default_infeasible():
    sp = load_space(json.dumps(PROBE_DOC))
    with pytest.raises(DefaultInfeasibleError):
        probe_range(sp, "x", 1, 3, lambda v: False)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 12), st.integers(1, 20))
def test_probe_within_declared_range(step, tries, fail_at):
    sp = load_space(json.dumps(PROBE_DOC))
    lo, hi = probe_range(sp, "x", step, tries, lambda v: abs(v - 4) < fail_at)
    assert 0 <= lo <= 4 <= hi <= 8
