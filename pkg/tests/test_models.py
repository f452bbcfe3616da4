import numpy as np
import pytest
from scipy import stats
from hypothesis import given
from hypothesis import strategies as st

from foresee.errors import CoincidentAgents, NonPositiveShape
from foresee.models import (
    CosSinBenchmark,
    DynamicUnicycle,
    GammaBenchmark,
    LeaderFollowerPlant,
    cossin_moments,
    gamma_distribution_moments,
    gamma_moments,
    lf_constraints,
    unicycle_step_mean,
)
from foresee.rng import substream

angles = st.floats(-10, 10, allow_nan=False)


def test_cossin_at_origin():
    m = cossin_moments([0.0, 0.0], 20.0)
    np.testing.assert_allclose(m.mean, [20.2, 0.2], atol=1e-12)
    np.testing.assert_allclose(m.cov, np.diag([408.05, 0.05]), atol=1e-10)


def test_cossin_at_quarter_turn():
    m = cossin_moments([np.pi / 2, 0.0], 20.0)
    np.testing.assert_allclose(m.mean, [0.2, 0.2], atol=1e-12)
    np.testing.assert_allclose(m.cov, np.diag([0.05, 0.05]), atol=1e-12)


def test_cossin_zero_scale():
    m = cossin_moments([1.3, -0.4], 0.0)
    np.testing.assert_allclose(m.mean, [0.0, 0.0])
    np.testing.assert_allclose(m.cov, 0.01 * np.eye(2))


@given(angles, angles, st.floats(-30, 30))
def test_cossin_cov_floor(x1, x2, a):
    m = cossin_moments([x1, x2], a)
    assert np.all(np.diag(m.cov) >= 0.01 - 1e-15)
    assert np.all(np.linalg.eigvalsh(m.cov) > 0)


def test_gamma_unit_shape():
    assert gamma_distribution_moments(1.0, 1.0) == pytest.approx((1.0, 1.0, 2.0, 9.0))


def test_gamma_shape_four_half_scale():
    assert gamma_distribution_moments(4.0, 0.5) == pytest.approx((2.0, 1.0, 1.0, 4.5))


def test_gamma_gaussian_limit():
    _, _, skew, kurt = gamma_distribution_moments(1e6, 1.0)
    assert abs(skew) < 0.01 and abs(kurt - 3.0) < 1e-4


def test_gamma_model_default_maps():
    m, h = gamma_moments(GammaBenchmark(1), [3.0])
    np.testing.assert_allclose(m.mean, [4.0])
    np.testing.assert_allclose(h.skewness, [1.0])


def test_gamma_nonpositive_shape():
    model = GammaBenchmark(1, shape_fn=lambda x: x)
    with pytest.raises(NonPositiveShape):
        gamma_moments(model, [-1.0])


def test_unicycle_straight_line():
    f = unicycle_step_mean(np.array([0.0, 0, 0, 1]), np.array([0.0, 0]), 0.05)
    np.testing.assert_allclose(f, [0.05, 0, 0, 1], atol=1e-15)


def test_unicycle_rest_fixed_point():
    x = np.array([0.3, -0.2, 1.1, 0.0])
    np.testing.assert_allclose(unicycle_step_mean(x, np.zeros(2), 0.05), x)


def test_unicycle_turning():
    f = unicycle_step_mean(np.array([0.0, 0, np.pi / 2, 2]), np.array([1.0, 1]), 0.05)
    np.testing.assert_allclose(f, [0.0, 0.1, np.pi / 2 + 0.05, 2.05], atol=1e-15)


def test_unicycle_cov_diagonal_nonnegative(rng):
    X = rng.standard_normal((50, 4))
    U = rng.standard_normal((50, 2))
    _, cov = DynamicUnicycle().moments_arrays(X, U)
    off = cov - np.einsum("...ii->...i", cov)[..., None] * np.eye(4)
    assert np.all(off == 0) and np.all(np.einsum("...ii->...i", cov) >= 0)


def test_lf_boundary_and_minimum():
    p = LeaderFollowerPlant()
    h1, _, _, _ = lf_constraints([p.s_min, 0.0], [0.0, 0.0, 0.0], p.s_min, p.s_max, p.fov)
    assert h1 == pytest.approx(0.0, abs=1e-15)
    mid = 0.5 * (p.s_min + p.s_max)
    _, _, _, V = lf_constraints([0.0, mid], [0.0, 0.0, 0.0], p.s_min, p.s_max, p.fov)
    assert V == pytest.approx(0.0, abs=1e-15)


def test_lf_dead_ahead():
    h3 = lf_constraints([1.0, 1.0], [0.0, 0.0, np.pi / 4], fov=np.pi / 3)[2]
    assert h3 == pytest.approx(1 - np.cos(np.pi / 3))


def test_lf_coincident():
    with pytest.raises(CoincidentAgents):
        lf_constraints([1.0, 1.0], [1.0, 1.0, 0.0])


def test_leader_moments_follow_model():
    p = LeaderFollowerPlant(dt=0.1)
    d, c = p.leader_step_moments(0.25)
    uy = 3 * np.cos(np.pi)
    np.testing.assert_allclose(d, 0.1 * np.array([2.5, 1.25 * uy]))
    np.testing.assert_allclose(c, 0.01 * 0.25 * (4.0 + uy**2) * np.eye(2))


def _moment_z(draws, mean, cov):
    """|empirical - model| in standard errors, for every mean and covariance entry."""
    n = draws.shape[0]
    emp = draws.mean(axis=0)
    se = np.sqrt(np.maximum(np.diag(cov), 1e-300) / n)
    dev = draws - emp
    ecov = dev.T @ dev / n
    # empirical SE of each covariance entry, valid for heavy-tailed draws too
    prod = dev[:, :, None] * dev[:, None, :]
    se_c = np.sqrt(prod.var(axis=0) / n)
    zm = np.abs(emp - mean) / se
    zc = np.where(se_c > 0, np.abs(ecov - cov) / np.maximum(se_c, 1e-300), np.abs(ecov - cov) * 1e12)
    return np.concatenate([zm.ravel(), zc.ravel()])


def _assert_within_3se(z):
    # 3 SE per statistic; across many statistics a few chance exceedances are
    # expected, so bound the count by the 99.9% binomial quantile
    p = 2 * stats.norm.sf(3.0)
    allowed = stats.binom.ppf(0.999, z.size, p)
    assert np.sum(z > 3.0) <= allowed, (np.sum(z > 3.0), allowed, np.sort(z)[-5:])


@pytest.mark.parametrize("model", [CosSinBenchmark(20.0), CosSinBenchmark(1.0), GammaBenchmark(2)])
def test_autonomous_samplers_match_moments(model):
    r = substream(5)
    z = []
    for i in range(20):
        x = r.uniform(-2, 2, model.state_dim)
        m = model.conditional_moments(x)
        draws = model.sample(np.tile(x, (10**5, 1)), substream(6, i))
        z.append(_moment_z(draws, m.mean, m.cov))
    _assert_within_3se(np.concatenate(z))


def test_unicycle_sampler_matches_moments():
    plant = DynamicUnicycle()
    r = substream(9)
    z = []
    for i in range(20):
        x = r.uniform(-1, 1, 4)
        u = r.uniform(-1, 1, 2)
        mean, cov = plant.moments_arrays(x, u)
        draws = plant.sample(np.tile(x, (10**5, 1)), np.tile(u, (10**5, 1)), substream(10, i))
        z.append(_moment_z(draws, mean, cov))
    _assert_within_3se(np.concatenate(z))


def test_leader_sampler_matches_moments():
    p = LeaderFollowerPlant()
    r = substream(11)
    z = []
    for i in range(20):
        pl = r.uniform(-1, 1, 2)
        t = float(r.uniform(0, 10))
        d, c = p.leader_step_moments(t)
        draws = p.sample_leader(np.tile(pl, (10**5, 1)), t, substream(12, i))
        z.append(_moment_z(draws, pl + d, c))
    _assert_within_3se(np.concatenate(z))


def test_samplers_deterministic_per_seed():
    X = np.zeros((5, 2))
    a = CosSinBenchmark().sample(X, substream(1, 2))
    b = CosSinBenchmark().sample(X, substream(1, 2))
    assert np.array_equal(a, b)
