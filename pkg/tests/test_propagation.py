import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foresee.errors import NotPSD
from foresee.models import CosSinBenchmark, Deterministic, GammaBenchmark, LinearGaussian, StochasticModel
from foresee.propagation import (
    compress_sigma_points,
    expand_sigma_points,
    expansion_only,
    monte_carlo_propagate,
    particle_moments,
    predict_horizon,
    successive_gaussian_propagate,
)
from foresee.rng import substream
from foresee.ut import GaussianMoments, SigmaSet, generate_ut_points, sample_moments

from .oracles import linear_gaussian_recursion


def _random_linear(r, n):
    A = r.standard_normal((n, n))
    F = r.standard_normal((n, n))
    return LinearGaussian(A, F @ F.T, r.standard_normal(n))


def _random_set(r, n, N):
    w = r.uniform(0.1, 1.0, N)
    return SigmaSet(r.standard_normal((N, n)), w / w.sum())


class Quadratic(StochasticModel):
    """A nonlinear, non-Gaussian-moment model used for the identity checks."""

    state_dim = 2

    def moments_arrays(self, X, step=0, xp=np):
        mean = xp.stack([X[..., 0] ** 2 - X[..., 1], xp.sin(X[..., 0]) * X[..., 1]], axis=-1)
        d = 0.1 + X[..., 0] ** 2
        off = 0.05 * xp.tanh(X[..., 1])
        cov = xp.stack([xp.stack([d, off], -1), xp.stack([off, 0.2 + 0 * d], -1)], -2)
        return mean, cov


# expansion


def test_deterministic_expansion_copies_mean():
    model = Deterministic(lambda X: 2.0 * X + 1.0, 2)
    s = SigmaSet([[1.0, -1.0]], [1.0])
    e = expand_sigma_points(s, model)
    assert len(e) == 5
    np.testing.assert_allclose(e.points, np.tile([3.0, -1.0], (5, 1)))


def test_linear_gaussian_expansion_exact(rng):
    model = _random_linear(rng, 3)
    m = GaussianMoments(rng.standard_normal(3), np.eye(3) * 0.5)
    e = sample_moments(expand_sigma_points(generate_ut_points(m), model))
    np.testing.assert_allclose(e.mean, model.A @ m.mean + model.b, atol=1e-8)
    np.testing.assert_allclose(e.cov, model.A @ m.cov @ model.A.T + model.Q, atol=1e-8)


def test_cossin_singleton_expansion():
    e = sample_moments(expand_sigma_points(SigmaSet([[0.0, 0.0]], [1.0]), CosSinBenchmark(20.0)))
    np.testing.assert_allclose(e.mean, [20.2, 0.2], atol=1e-12)
    np.testing.assert_allclose(e.cov, np.diag([408.05, 0.05]), atol=1e-10)


def test_vectorized_matches_loop(rng):
    s = _random_set(rng, 2, 7)
    a = expand_sigma_points(s, Quadratic())
    b = expand_sigma_points(s, Quadratic(), vectorized=False)
    np.testing.assert_allclose(a.points, b.points, atol=1e-12)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-15)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        expand_sigma_points(SigmaSet([[0.0]], [1.0]), CosSinBenchmark())


@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_iterated_expectation_and_total_variance(N, seed):
    r = substream(seed)
    s = _random_set(r, 2, N)
    model = Quadratic()
    e = sample_moments(expand_sigma_points(s, model, k=float(r.uniform(0.2, 3.0))))
    means, covs = model.moments_batch(s.points)
    mbar = s.weights @ means
    dev = means - mbar
    total = np.einsum("i,ijk->jk", s.weights, covs) + (s.weights[:, None] * dev).T @ dev
    assert np.max(np.abs(e.mean - mbar)) <= 1e-8
    assert np.max(np.abs(e.cov - total)) <= 1e-8


# compression


def test_compression_is_moment_fixed_point(rng):
    m = GaussianMoments(rng.standard_normal(2), np.array([[2.0, 0.3], [0.3, 1.0]]))
    s = generate_ut_points(m)
    c = sample_moments(compress_sigma_points(s))
    np.testing.assert_allclose(c.mean, sample_moments(s).mean, atol=1e-10)
    np.testing.assert_allclose(c.cov, sample_moments(s).cov, atol=1e-10)


def test_compression_of_linear_expansion(rng):
    model = _random_linear(rng, 2)
    s = _random_set(rng, 2, 9)
    m = sample_moments(s)
    e = expand_sigma_points(s, model)
    assert len(e) == 45
    c = compress_sigma_points(e)
    assert len(c) == 5
    np.testing.assert_allclose(sample_moments(c).mean, model.A @ m.mean + model.b, atol=1e-8)
    np.testing.assert_allclose(sample_moments(c).cov, model.A @ m.cov @ model.A.T + model.Q, atol=1e-8)


def test_compression_of_identical_points():
    c = compress_sigma_points(SigmaSet(np.tile([1.0, 2.0], (9, 1)), np.full(9, 1 / 9)))
    np.testing.assert_allclose(c.points, np.tile([1.0, 2.0], (5, 1)))


@settings(max_examples=1000)
@given(st.integers(1, 4), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_compression_preserves_two_moments(n, N, seed):
    r = substream(seed)
    s = _random_set(r, n, N)
    a, b = sample_moments(s), sample_moments(compress_sigma_points(s))
    assert len(compress_sigma_points(s)) == 2 * n + 1
    assert np.max(np.abs(a.mean - b.mean)) <= 1e-9
    assert np.max(np.abs(a.cov - b.cov)) <= 1e-9


# horizon prediction


def test_identity_model_is_frozen():
    m = GaussianMoments([1.0, 2.0], [[0.5, 0.1], [0.1, 0.3]])
    p = predict_horizon(m, Deterministic(lambda X: X, 2), 4)
    for s in p.per_step:
        np.testing.assert_allclose(s.points, p.per_step[0].points, atol=1e-12)


def test_linear_horizon_matches_closed_form(rng):
    model = _random_linear(rng, 3)
    model = LinearGaussian(model.A * 0.6, model.Q, model.b)
    m = GaussianMoments(rng.standard_normal(3), np.eye(3))
    p = predict_horizon(m, model, 3)
    ref = linear_gaussian_recursion(model.A, model.Q, model.b, m.mean, m.cov, 3)
    for (mu, S), got in zip(ref, p.step_moments):
        np.testing.assert_allclose(got.mean, mu, atol=1e-7)
        np.testing.assert_allclose(got.cov, S, atol=1e-7)


def test_cardinality_constant_vs_growing():
    m = GaussianMoments([0.1, 0.2], np.eye(2) * 0.1)
    ec = predict_horizon(m, Quadratic(), 4)
    eo = expansion_only(m, Quadratic(), 4)
    assert [len(s) for s in ec.per_step] == [5] * 5
    assert [len(s) for s in eo.per_step] == [5 ** (t + 1) for t in range(5)]
    for s, mom in zip(ec.per_step, ec.step_moments):
        np.testing.assert_allclose(sample_moments(s).cov, mom.cov, atol=1e-10)


def test_expansion_only_capped():
    with pytest.raises(ValueError):
        expansion_only(GaussianMoments([0.0, 0.0], np.eye(2)), Quadratic(), 7)


def test_horizon_must_be_positive():
    with pytest.raises(ValueError):
        predict_horizon(GaussianMoments([0.0], [[1.0]]), Deterministic(lambda X: X, 1), 0)


def test_not_psd_reports_step():
    class Bad(StochasticModel):
        state_dim = 1

        def moments_arrays(self, X, step=0, xp=np):
            c = np.where(step == 1, -1.0, 1.0) * np.ones(X.shape[:-1] + (1, 1))
            return X, c

    with pytest.raises(NotPSD) as info:
        predict_horizon(GaussianMoments([0.0], [[1.0]]), Bad(), 3)
    assert info.value.step == 2


def test_prediction_is_deterministic():
    m = GaussianMoments([0.0, 0.0], np.zeros((2, 2)))
    a = predict_horizon(m, CosSinBenchmark(20.0), 3)
    b = predict_horizon(m, CosSinBenchmark(20.0), 3)
    for x, y in zip(a.per_step, b.per_step):
        assert np.array_equal(x.points, y.points)


# Monte Carlo


def test_mc_deterministic_orbit():
    model = Deterministic(lambda X: 0.5 * X + 1.0, 1)
    traj = monte_carlo_propagate([4.0], model, 3, 10, seed=0)
    for t, x in zip([4.0, 3.0, 2.5, 2.25], traj):
        np.testing.assert_allclose(x, t)


def test_mc_linear_mean_within_three_se(rng):
    model = _random_linear(rng, 2)
    x0 = np.array([1.0, -1.0])
    X = monte_carlo_propagate(x0, model, 1, 50000, seed=3)[1]
    tol = 3 * np.sqrt(np.trace(model.Q) / 50000)
    assert np.linalg.norm(X.mean(axis=0) - (model.A @ x0 + model.b)) <= tol


def test_mc_gamma_skewness():
    X = monte_carlo_propagate([3.0], GammaBenchmark(1), 1, 200000, seed=4)[1]
    dev = X[:, 0] - X[:, 0].mean()
    skew = np.mean(dev**3) / np.mean(dev**2) ** 1.5
    assert skew == pytest.approx(2 / np.sqrt(4.0), abs=0.05)


def test_mc_reproducible_and_worker_independent(monkeypatch):
    model = CosSinBenchmark(20.0)
    a = monte_carlo_propagate([0.0, 0.0], model, 3, 10000, seed=11, workers=1)
    b = monte_carlo_propagate([0.0, 0.0], model, 3, 10000, seed=11, workers=4)
    monkeypatch.setenv("FORESEE_THREADS", "2")
    c = monte_carlo_propagate([0.0, 0.0], model, 3, 10000, seed=11)
    for x, y, z in zip(a, b, c):
        assert np.array_equal(x, y) and np.array_equal(x, z)


def test_mc_different_seeds_differ():
    a = monte_carlo_propagate([0.0, 0.0], CosSinBenchmark(1.0), 1, 100, seed=1)[1]
    b = monte_carlo_propagate([0.0, 0.0], CosSinBenchmark(1.0), 1, 100, seed=2)[1]
    assert not np.array_equal(a, b)


# successive Gaussian


def test_successive_gaussian_exact_for_linear(rng):
    model = _random_linear(rng, 2)
    m = GaussianMoments([0.3, 0.4], np.eye(2) * 0.2)
    sg = successive_gaussian_propagate(m, model, 3)
    ref = linear_gaussian_recursion(model.A, model.Q, model.b, m.mean, m.cov, 3)
    for (mu, S), got in zip(ref, sg):
        np.testing.assert_allclose(got.mean, mu, atol=1e-6)
        np.testing.assert_allclose(got.cov, S, atol=1e-6 * (1 + np.max(np.abs(S))))


def test_successive_gaussian_deterministic_orbit():
    model = Deterministic(lambda X: np.sin(X) + 1.0, 2)
    sg = successive_gaussian_propagate(GaussianMoments([0.2, 0.4], np.zeros((2, 2))), model, 3)
    x = np.array([0.2, 0.4])
    for m in sg[1:]:
        x = np.sin(x) + 1.0
        np.testing.assert_allclose(m.mean, x, atol=1e-12)
        np.testing.assert_allclose(m.cov, 0.0, atol=1e-12)


def test_successive_gaussian_worse_than_ec_at_three_steps():
    # MC reference pooled over 20 seeded 50k-particle runs
    model = CosSinBenchmark(20.0)
    m = GaussianMoments([0.0, 0.0], np.zeros((2, 2)))
    ref = np.mean([particle_moments(monte_carlo_propagate([0.0, 0.0], model, 3, 50000, s)[3]).mean
                   for s in range(20)], axis=0)
    ec = predict_horizon(m, model, 3).step_moments[3].mean
    sg = successive_gaussian_propagate(m, model, 3)[3].mean
    assert np.linalg.norm(sg - ref) > np.linalg.norm(ec - ref)
