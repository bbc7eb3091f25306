import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mfgjump.errors import ConfigurationError
from mfgjump.projection import (
    ConstantLaw,
    LognormalLaw,
    NormalLaw,
    TwoPointLaw,
    TypeLaws,
    energy_surrogate,
    law_mean,
    project_pi,
    project_wealth_integral,
    sample_types,
    type_moments,
)
from mfgjump.stats import estimate

finite = st.floats(-10, 10, allow_nan=False)
panel = arrays(float, st.tuples(st.integers(1, 5), st.integers(1, 6), st.integers(1, 4)), elements=finite)


def test_constants_project_to_themselves():
    assert np.all(project_pi(np.full((3, 7, 4), 0.3)).values == 0.3)


def test_common_measurable_values_are_fixed():
    rng = np.random.default_rng(0)
    common = rng.normal(size=(5, 1, 4))
    v = np.repeat(common, 9, axis=1)
    assert np.array_equal(project_pi(v).values, common[:, 0])


@settings(max_examples=50, deadline=None)
@given(panel)
def test_idempotent(v):
    once = project_pi(v).values
    twice = project_pi(project_pi(v).broadcast(v.shape[1])).values
    assert np.allclose(twice, once, rtol=1e-15, atol=1e-15 * max(1.0, np.max(np.abs(once))))


@settings(max_examples=50, deadline=None)
@given(panel, finite, finite, st.integers(0, 100))
def test_linear(u, a, b, seed):
    v = np.random.default_rng(seed).normal(size=u.shape)
    lhs = project_pi(a * u + b * v).values
    rhs = a * project_pi(u).values + b * project_pi(v).values
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_law_of_large_numbers_for_inverse_alpha():
    laws = TypeLaws(ConstantLaw(0.0), TwoPointLaw((1.0, 2.0)), ConstantLaw(0.0))
    target = law_mean(laws.alpha, lambda a: 1 / a)
    assert target == 0.75
    for M in (100, 10_000):
        types = sample_types(laws, M, 3)
        pi = project_pi((1 / types.alpha)[None, :])
        assert abs(pi.values[0] - target) <= 4 * pi.se[0]


def test_zero_agents_rejected():
    with pytest.raises(ConfigurationError, match="M >= 1"):
        project_pi(np.zeros((3, 0, 2)))
    laws = TypeLaws(ConstantLaw(0.0), ConstantLaw(1.0), ConstantLaw(0.0))
    with pytest.raises(ConfigurationError):
        sample_types(laws, 0, 0)


def test_wealth_integral_sides():
    rng = np.random.default_rng(1)
    P, M, n = 200, 50, 6
    dWh = rng.normal(size=(P, n, 1)) * np.sqrt(1 / n)
    lhs, rhs = project_wealth_integral(np.zeros((P, M, n, 1)), dWh)
    assert np.all(lhs == 0) and np.all(rhs == 0)
    common = np.repeat(rng.normal(size=(P, 1, n, 1)), M, axis=1)
    lhs, rhs = project_wealth_integral(common, dWh)
    assert np.allclose(lhs, rhs, rtol=1e-14, atol=1e-14)


def test_wealth_integral_agent_constants():
    """theta = c k with agent constants k of mean m: both sides approach m int c dW_hat."""
    rng = np.random.default_rng(2)
    P, n, c, m = 400, 5, 0.7, 1.5
    dWh = rng.normal(size=(P, n, 1)) * np.sqrt(1 / n)
    target = m * c * dWh.sum(axis=(1, 2))
    for M in (20, 2000):
        k = rng.uniform(0, 2 * m, size=(P, M))
        theta = c * k[..., None, None] * np.ones((1, 1, n, 1))
        lhs, rhs = project_wealth_integral(theta, dWh)
        assert np.allclose(lhs, rhs, atol=1e-12)
        e = estimate(lhs - target)
        assert e.within(0.0, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 3))
def test_energy_bound(seed, scale):
    rng = np.random.default_rng(seed)
    z = scale * rng.normal(size=(50, 20, 6, 1)) + rng.normal(size=(50, 1, 6, 1))
    full = energy_surrogate(z, 1 / 6)
    proj = energy_surrogate(project_pi(z).values, 1 / 6)
    assert proj.mean <= full.mean + 3 * full.se


def test_tower_consistency():
    """Averaging the projection over common paths reproduces the direct average."""
    rng = np.random.default_rng(5)
    v = rng.normal(size=(300, 40, 3)) + rng.normal(size=(300, 1, 3))
    direct = v.mean(axis=(0, 1))
    assert np.allclose(project_pi(v).values.mean(axis=0), direct, atol=1e-14)


def test_type_law_validation():
    with pytest.raises(ConfigurationError, match=r"E\[rho\] != 1"):
        TypeLaws(ConstantLaw(0.0), ConstantLaw(1.0), TwoPointLaw((0.5, 1.5)))
    with pytest.raises(ConfigurationError, match="bounded away from 0"):
        TypeLaws(ConstantLaw(0.0), LognormalLaw(0.0, 1.0), ConstantLaw(0.0))
    with pytest.raises(ConfigurationError, match="constant or two-point"):
        TypeLaws(ConstantLaw(0.0), ConstantLaw(1.0), NormalLaw(0.0, 1.0))
    with pytest.raises(ConfigurationError):
        TwoPointLaw((1.0, 2.0), (0.3, 0.3))


def test_types_frozen_and_reproducible():
    laws = TypeLaws(NormalLaw(1.0, 0.5), LognormalLaw(0.0, 0.3, floor=0.5), TwoPointLaw((0.0, 0.5)))
    a, b = sample_types(laws, 500, 9), sample_types(laws, 500, 9)
    assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.x0, b.x0)
    assert np.all(a.alpha >= 0.5)
    with pytest.raises(ValueError):
        a.alpha[0] = 1.0
    mom = type_moments(laws, a)
    assert mom.mean_x0 == 1.0 and mom.mean_rho == 0.25
    assert np.isclose(mom.mean_inv_alpha, np.mean(1 / a.alpha))
