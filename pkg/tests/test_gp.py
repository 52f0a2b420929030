import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from sqltune import gp
from sqltune.gp import GpHyper, IllConditionedError


def rand_hyper(rng, dim, noise=None):
    return GpHyper(
        tuple(rng.uniform(0.2, 2.0, dim)),
        float(rng.uniform(0.5, 2.0)),
        float(rng.uniform(1e-3, 0.1) if noise is None else noise),
    )


def dense_kernel(A, B, h):
    K = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            K[i, j] = gp.kernel(a, b, h)
    return K


def dense_posterior(X, y, Xs, h):
    """Posterior mean and covariance written out with an explicit inverse."""
    Kinv = np.linalg.inv(dense_kernel(X, X, h) + h.noise_variance * np.eye(len(X)))
    Ks = dense_kernel(Xs, X, h)
    mean = Ks @ Kinv @ y
    cov = dense_kernel(Xs, Xs, h) - Ks @ Kinv @ Ks.T
    return mean, np.diag(cov)


def test_kernel_zero_distance_and_symmetry():
    h = GpHyper((0.5, 2.0), 1.7, 0.01)
    a, b = [0.1, 0.3], [0.9, -0.2]
    assert gp.kernel(a, a, h) == pytest.approx(1.7)
    assert gp.kernel(a, b, h) == gp.kernel(b, a, h)


def test_kernel_far_decay():
    h = GpHyper((0.5,), 1.0, 0.01)
    assert gp.kernel([0.0], [1e6 * 0.5], h) < 1e-12


def test_kernel_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    h = rand_hyper(rng, 3)
    A, B = rng.uniform(size=(4, 3)), rng.uniform(size=(5, 3))
    assert np.allclose(gp.kernel_matrix(A, B, h), dense_kernel(A, B, h), atol=1e-12)


def test_kernel_length_mismatch():
    with pytest.raises(ValueError):
        gp.kernel([0.0, 1.0], [0.0], GpHyper((1.0, 1.0), 1.0, 0.1))


@pytest.mark.parametrize("kw", [dict(lengthscales=(0.0,)), dict(signal_variance=-1.0), dict(noise_variance=-1.0)])
def test_hyper_rejects_nonpositive(kw):
    base = dict(lengthscales=(1.0,), signal_variance=1.0, noise_variance=0.1)
    base.update(kw)
    with pytest.raises(ValueError):
        GpHyper(**base)


def test_single_point_alpha():
    h = GpHyper((1.0,), 2.0, 0.5)
    m = gp.fit([[0.3]], [1.5], h)
    assert m.alpha[0] == pytest.approx(1.5 / 2.5)


def test_alpha_matches_dense_inverse():
    rng = np.random.default_rng(1)
    for _ in range(10):
        X = rng.uniform(size=(20, 3))
        y = rng.normal(size=20)
        h = rand_hyper(rng, 3)
        m = gp.fit(X, y, h)
        ref = np.linalg.inv(dense_kernel(X, X, h) + h.noise_variance * np.eye(20)) @ y
        assert np.allclose(m.alpha, ref, atol=1e-8)


def test_posterior_matches_dense_formula():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n, d = int(rng.integers(2, 31)), int(rng.integers(1, 7))
        X = rng.uniform(size=(n, d))
        y = rng.normal(size=n)
        h = rand_hyper(rng, d)
        Xs = rng.uniform(-0.2, 1.2, size=(7, d))
        mean, var = gp.predict(gp.fit(X, y, h), Xs)
        rm, rv = dense_posterior(X, y, Xs, h)
        assert np.allclose(mean, rm, atol=1e-8)
        assert np.allclose(var, np.maximum(rv, 0), atol=1e-8)


def test_noiseless_interpolation():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(8, 2))
    y = rng.normal(size=8)
    h = GpHyper((0.4, 0.4), 1.3, 0.0)
    m = gp.fit(X, y, h)
    mean, var = gp.predict(m, X)
    assert np.allclose(mean, y, atol=1e-5)
    assert np.all(var <= 1e-6 * h.signal_variance)


def test_prior_reversion_far_away():
    h = GpHyper((0.3,), 1.8, 0.01)
    m = gp.fit([[0.0], [0.5]], [1.0, -1.0], h)
    mean, var = gp.predict(m, [[1e4]])
    assert mean[0] == pytest.approx(0.0, abs=1e-12)
    assert var[0] == pytest.approx(1.8)


def test_duplicate_rows_use_jitter():
    h = GpHyper((1.0,), 1.0, 0.0)
    m = gp.fit([[0.2], [0.2], [0.7]], [1.0, 1.0, 0.0], h)
    assert m.jitter > 0


def test_ill_conditioned_raises():
    K = np.full((3, 3), 1.0)
    K[0, 1] = K[1, 0] = 5.0  # indefinite beyond any jitter cap
    with pytest.raises(IllConditionedError):
        gp._cholesky(K, 1.0, 0.0)


def test_predict_dimension_mismatch():
    m = gp.fit([[0.0, 1.0]], [0.0], GpHyper((1.0, 1.0), 1.0, 0.1))
    with pytest.raises(ValueError):
        gp.predict(m, [[0.0]])


def test_variance_bounded_by_prior():
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(15, 3))
    h = rand_hyper(rng, 3)
    _, var = gp.predict(gp.fit(X, rng.normal(size=15), h), rng.uniform(-1, 2, size=(200, 3)))
    assert np.all(var >= 0)
    assert np.all(var <= h.signal_variance + 1e-9)


def test_added_point_never_increases_variance():
    rng = np.random.default_rng(5)
    X = rng.uniform(size=(6, 2))
    h = GpHyper((0.5, 0.5), 1.0, 0.0)
    x = rng.uniform(size=(1, 2))
    _, v0 = gp.predict(gp.fit(X, rng.normal(size=6), h), x)
    _, v1 = gp.predict(gp.fit(np.vstack([X, x]), rng.normal(size=7), h), x)
    assert v1[0] <= v0[0] + 1e-12


def test_lml_scalar_closed_form():
    h = GpHyper((1.0,), 2.0, 0.3)
    m = gp.fit([[0.0]], [0.0], h)
    assert gp.log_marginal_likelihood(m) == pytest.approx(-0.5 * math.log(2.3) - 0.5 * math.log(2 * math.pi))


def test_lml_matches_mvn_density():
    rng = np.random.default_rng(6)
    for _ in range(10):
        n, d = int(rng.integers(2, 25)), int(rng.integers(1, 5))
        X = rng.uniform(size=(n, d))
        y = rng.normal(size=n)
        h = rand_hyper(rng, d)
        C = dense_kernel(X, X, h) + h.noise_variance * np.eye(n)
        ref = multivariate_normal(np.zeros(n), C).logpdf(y)
        assert gp.log_marginal_likelihood(gp.fit(X, y, h)) == pytest.approx(ref, abs=1e-8)


def test_lml_finite_over_noise_grid():
    rng = np.random.default_rng(7)
    X = rng.uniform(size=(10, 2))
    y = rng.normal(size=10)
    for noise in np.logspace(-8, 1, 30):
        m = gp.fit(X, y, GpHyper((0.5, 0.5), 1.0, float(noise)))
        assert math.isfinite(gp.log_marginal_likelihood(m))


def test_evidence_agrees_with_fitted_lml():
    rng = np.random.default_rng(8)
    X = rng.uniform(size=(12, 3))
    y = rng.normal(size=12)
    h = GpHyper((0.5, 0.8, 1.2), 1.1, 0.05)
    ev = gp._Evidence(X, y)
    # the sampler always adds 1e-8 * signal variance of jitter
    ref = gp.fit(X, y, GpHyper(h.lengthscales, h.signal_variance, h.noise_variance + 1e-8 * h.signal_variance))
    assert ev(h.to_log()) == pytest.approx(gp.log_marginal_likelihood(ref), abs=1e-8)


def test_mcmc_deterministic_and_positive():
    rng = np.random.default_rng(9)
    X = rng.uniform(size=(10, 2))
    y = rng.normal(size=10)
    a, da = gp.sample_hypers_mcmc(X, y, 10, seed=3)
    b, db = gp.sample_hypers_mcmc(X, y, 10, seed=3)
    assert a == b and not da and not db
    assert len(a) == 10
    for h in a:
        assert min(h.lengthscales) > 0 and h.signal_variance > 0 and h.noise_variance > 0


def test_mcmc_constant_targets_degenerate():
    samples, degenerate = gp.sample_hypers_mcmc(np.eye(3), [1.0, 1.0, 1.0], 4, seed=0)
    assert degenerate and len(samples) == 4


def test_mcmc_needs_two_points():
    with pytest.raises(ValueError):
        gp.sample_hypers_mcmc([[0.0]], [1.0])


def test_mcmc_recovers_lengthscale():
    medians = []
    true = GpHyper((0.3,), 1.0, 1e-4)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.uniform(size=(25, 1))
        K = gp.kernel_matrix(X, X, true) + 1e-4 * np.eye(25)
        y = np.linalg.cholesky(K) @ rng.standard_normal(25)
        samples, _ = gp.sample_hypers_mcmc(X, y, 10, seed=seed)
        medians.append(np.median([h.lengthscales[0] for h in samples]))
    assert 0.1 <= np.median(medians) <= 0.9


def test_elliptical_slice_stays_put_when_nothing_accepted():
    rng = np.random.default_rng(0)
    theta = np.zeros(2)
    out, ll = gp.elliptical_slice(theta, lambda t: -math.inf, 0.0, np.zeros(2), np.ones(2), rng)
    assert np.array_equal(out, theta) and ll == 0.0
