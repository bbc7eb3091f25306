import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfgjump.basis import build_time_grid, make_jump_spec, no_jumps, simulate_bundle
from mfgjump.market import constant_market
from mfgjump.measure_change import doleans_exponential, phat_expectation, simulate_under_phat, tilt_compensator
from mfgjump.stats import estimate

GRID = build_time_grid(1.0, 8)


def _probs(spec, bundle):
    rates = spec.rates(0.0)
    return np.broadcast_to(rates * GRID.dt, bundle.common_counts.shape)


def _density(spec, phi, u, P=40_000, seed=0):
    b = simulate_bundle(GRID, spec, 1, P, 1, seed)
    counts = b.common_counts + b.idio_counts[:, 0]
    U = np.full(counts.shape, u)
    dens = doleans_exponential(np.full(b.dW.shape, phi), U, b.dW, counts, _probs(spec, b), 1.0, GRID.dt)
    return b, dens


def test_trivial_density_is_one():
    spec = make_jump_spec([{"mark": 1.0, "weight": 0.5}])
    _, dens = _density(spec, 0.0, 0.0, P=100)
    assert np.all(dens.values == 1.0)


def test_gaussian_density_closed_form_and_unit_mean():
    b, dens = _density(no_jumps(), 0.2, 0.0)
    W_T = b.dW[..., 0].sum(axis=1)
    assert np.allclose(dens.terminal, np.exp(-0.2 * W_T - 0.02))
    assert estimate(dens.terminal).within(1.0, 4)
    assert np.all(dens.values[:, 0] == 1.0)


@pytest.mark.parametrize("u", [-0.7, 0.4])
def test_jump_density_unit_mean(u):
    spec = make_jump_spec([{"mark": 1.0, "weight": 0.8}, {"mark": 1.0, "weight": 0.5, "split": "idiosyncratic"}])
    _, dens = _density(spec, 0.1, u)
    assert dens.report()["positive"]
    assert estimate(dens.terminal).within(1.0, 4)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-1, 1), st.integers(0, 10_000))
def test_density_positive(u, phi, seed):
    spec = make_jump_spec([{"mark": 1.0, "weight": 2.0}])
    _, dens = _density(spec, phi, u, P=200, seed=seed)
    assert np.all(dens.values > 0)


def test_tilt_compensator_examples():
    spec = make_jump_spec([{"mark": 1.0, "weight": 0.5}, {"mark": 2.0, "weight": 0.3}])
    same = tilt_compensator(spec, 1.0, np.zeros((4, 2)))
    state = {"cell": 2}
    assert np.allclose(same.density(0.5, state), spec.density(0.5))
    double = tilt_compensator(spec, 1.0, np.full((4, 2), np.log(2.0)))
    assert np.allclose(double.density(0.5, state), 2 * spec.density(0.5))
    assert np.isclose(double.c_nu, 2 * spec.c_nu)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 3), st.lists(st.floats(-1, 1), min_size=8, max_size=8))
def test_tilted_density_within_recorded_bound(alpha, u):
    spec = make_jump_spec([{"mark": 1.0, "weight": 0.5}, {"mark": 1.0, "weight": 0.5, "split": "idiosyncratic"}])
    U = np.array(u).reshape(4, 2)
    tilted = tilt_compensator(spec, alpha, U)
    for cell in range(4):
        z = tilted.density(cell * 0.25, {"cell": cell})
        assert np.all(z >= 0) and np.all(z <= tilted.c_nu * (1 + 1e-12))


def test_phat_expectations():
    phi = 0.3
    b, dens = _density(no_jumps(), phi, 0.0, P=50_000, seed=4)
    dWh = b.dW[..., 0] + phi * GRID.dt
    # normalisation
    assert phat_expectation(np.ones(b.n_paths), dens).within(1.0, 4)
    # a bounded integrand integrated against W_hat has zero mean
    w = np.cumsum(b.dW[..., 0], axis=1) - b.dW[..., 0]
    theta = np.clip(0.5 + w, -1, 1)
    gain = np.sum(theta * dWh, axis=1)
    assert phat_expectation(gain, dens).within(0.0, 4)
    # wealth is a martingale under the tilted measure
    assert phat_expectation(1.5 + gain, dens).within(1.5, 4)


def test_reweighting_matches_tilted_simulation():
    spec = make_jump_spec([{"mark": 1.0, "weight": 0.6}, {"mark": 1.0, "weight": 0.4, "split": "idiosyncratic"}])
    U = np.tile([0.5, -0.4], (GRID.n_steps, 1))
    alpha, phi, P = 1.2, 0.2, 60_000
    b = simulate_bundle(GRID, spec, 1, P, 1, 11)
    counts = b.common_counts + b.idio_counts[:, 0]
    dens = doleans_exponential(np.full(b.dW.shape, phi), np.broadcast_to(U, counts.shape), b.dW, counts,
                               _probs(spec, b), alpha, GRID.dt)
    hb = simulate_under_phat(GRID, constant_market(phi), tilt_compensator(spec, alpha, U), P, 12)
    hcounts = hb.common_counts + hb.idio_counts[:, 0]
    for k in range(2):
        a = phat_expectation(counts[..., k].sum(axis=1), dens)
        h = estimate(hcounts[..., k].sum(axis=1))
        assert abs(a.mean - h.mean) <= 4 * np.hypot(a.se, h.se)
        assert np.isclose(h.mean, spec.weights[k] * np.exp(alpha * U[0, k]), rtol=0.05)
    a = phat_expectation(b.dW[..., 0].sum(axis=1), dens)
    h = estimate(hb.dW[..., 0].sum(axis=1))
    assert abs(a.mean - h.mean) <= 4 * np.hypot(a.se, h.se)
