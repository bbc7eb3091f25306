import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfgjump.basis import (
    COMMON,
    ConstantIntensity,
    PiecewiseIntensity,
    StateScaledIntensity,
    build_time_grid,
    compensator_integral,
    make_jump_spec,
    simulate_brownian,
    simulate_bundle,
    simulate_jump_measure,
)
from mfgjump.errors import ConfigurationError, ModelViolationError


def test_grid_nodes():
    assert np.allclose(build_time_grid(1.0, 4).nodes, [0, 0.25, 0.5, 0.75, 1.0])
    assert np.allclose(build_time_grid(1.0, 1).nodes, [0, 1.0])
    with pytest.raises(ConfigurationError):
        build_time_grid(0.0, 4)
    with pytest.raises(ConfigurationError):
        build_time_grid(1.0, 0)


@given(st.floats(0.01, 50), st.integers(1, 200))
def test_grid_invariants(T, n):
    g = build_time_grid(T, n)
    assert g.dt > 0
    assert g.nodes[0] == 0 and np.isclose(g.nodes[-1], T)
    assert np.all(np.diff(g.nodes) > 0)


def test_brownian_moments_and_determinism():
    g = build_time_grid(1.0, 4)
    dW = simulate_brownian(g, 2, 100_000, 11)
    se = np.sqrt(g.dt / dW.shape[0])
    assert np.all(np.abs(dW.mean(axis=0)) < 4 * se)
    var_se = g.dt * np.sqrt(2 / dW.shape[0])
    assert np.all(np.abs(dW.var(axis=0) - g.dt) < 4 * var_se)
    assert np.array_equal(dW, simulate_brownian(g, 2, 100_000, 11))


def test_brownian_independent_of_threads_and_slicing():
    g = build_time_grid(1.0, 3)
    full = simulate_brownian(g, 1, 3000, 5)
    assert np.array_equal(full, simulate_brownian(g, 1, 3000, 5, workers=3))
    assert np.array_equal(full[1500:1700], simulate_brownian(g, 1, 200, 5, path_offset=1500))


def test_poisson_mean():
    g = build_time_grid(1.0, 4)
    spec = make_jump_spec([{"mark": 1.0, "weight": 3.0, "split": COMMON}])
    n = simulate_jump_measure(g, spec, 1, 100_000, 1).common_counts.sum(axis=(1, 2))
    assert abs(n.mean() - 3.0) < 4 * n.std() / np.sqrt(n.size)


def test_null_intensity():
    g = build_time_grid(1.0, 4)
    spec = make_jump_spec([{"mark": 1.0, "weight": 3.0}], ConstantIntensity((0.0,)), 1.0)
    js = simulate_jump_measure(g, spec, 2, 1000, 1)
    assert js.common_counts.sum() == 0 and js.idio_counts.sum() == 0


def test_common_shared_and_idio_independent():
    g = build_time_grid(1.0, 2)
    spec = make_jump_spec(
        [{"mark": 1.0, "weight": 1.0, "split": "common"}, {"mark": 0.5, "weight": 2.0, "split": "idiosyncratic"}]
    )
    b = simulate_bundle(g, spec, 1, 100_000, 2, 3, with_events=False)
    # common counts are stored once per path, so every agent sees them
    assert b.idio_counts[..., 0].sum() == 0 and b.common_counts[..., 1].sum() == 0
    a0, a1 = b.idio_counts[:, 0, :, 1].sum(axis=1), b.idio_counts[:, 1, :, 1].sum(axis=1)
    r = np.corrcoef(a0, a1)[0, 1]
    assert abs(r) < 4 / np.sqrt(a0.size)


def test_events_inside_cells_and_owner():
    g = build_time_grid(2.0, 5)
    spec = make_jump_spec(
        [{"mark": 1.0, "weight": 2.0, "split": "common"}, {"mark": -1.0, "weight": 2.0, "split": "idiosyncratic"}]
    )
    b = simulate_bundle(g, spec, 1, 200, 3, 9)
    ev = b.events
    assert np.all(ev["time"] >= ev["cell"] * g.dt) and np.all(ev["time"] < (ev["cell"] + 1) * g.dt)
    assert np.all((ev["agent"] < 0) == spec.common[ev["atom"]])
    assert len(ev) == b.common_counts.sum() + b.idio_counts.sum()
    assert all(e.owner == COMMON for e in b.common_jumps(0))
    with pytest.raises(ValueError):
        b.dW[0, 0, 0] = 1.0


def test_compensator_integral_examples():
    one = make_jump_spec([{"mark": 1.0, "weight": 3.0}])
    assert compensator_integral(one, lambda e: np.zeros(len(e)), 0.0) == 0.0
    assert compensator_integral(one, np.array([2.0]), 0.0) == pytest.approx(6.0)
    two = make_jump_spec([{"mark": 1.0, "weight": 1.0}, {"mark": 2.0, "weight": 2.0}], ConstantIntensity((0.5, 0.5)), 1.0)
    assert compensator_integral(two, lambda e: np.ones(len(e)), 0.0) == pytest.approx(1.5)


def test_empirical_compensator_identity_state_dependent():
    g = build_time_grid(1.0, 8)
    zeta = StateScaledIntensity((0.6, 0.6), 0.5, "w")
    spec = make_jump_spec(
        [{"mark": 1.0, "weight": 1.0, "split": "common"}, {"mark": 2.0, "weight": 1.5, "split": "idiosyncratic"}],
        zeta,
        0.9,
    )
    b = simulate_bundle(g, spec, 1, 40_000, 1, 4, with_events=False)
    gvals = np.array([1.0, -2.0])
    lhs = (b.common_counts @ gvals).sum(axis=1) + (b.idio_counts[:, 0] @ gvals).sum(axis=1)
    W = b.w_levels()
    rhs = np.zeros(b.n_paths)
    for i in range(g.n_steps):
        state = {"w": W[:, i][:, None, :]}
        rhs += compensator_integral(spec, gvals, i * g.dt, state)[:, 0] * g.dt
    diff = lhs - rhs
    assert abs(diff.mean()) < 4 * diff.std() / np.sqrt(diff.size)
    bound = spec.c_nu * g.horizon * spec.weights.sum()
    assert lhs.size and (b.common_counts.sum() + b.idio_counts.sum()) / b.n_paths <= bound


def test_piecewise_intensity_mean():
    g = build_time_grid(1.0, 4)
    spec = make_jump_spec([{"mark": 1.0, "weight": 2.0}], PiecewiseIntensity((0.5,), ((1.0,), (0.25,))), 1.0)
    n = simulate_jump_measure(g, spec, 1, 50_000, 2).common_counts.sum(axis=(1, 2))
    assert abs(n.mean() - 1.25) < 4 * n.std() / np.sqrt(n.size)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        make_jump_spec([{"mark": 0.0, "weight": 1.0}])
    with pytest.raises(ConfigurationError):
        make_jump_spec([{"mark": 1.0, "weight": -1.0}])
    with pytest.raises(ConfigurationError):
        make_jump_spec([{"mark": 1.0, "weight": 1.0, "split": "both"}])
    with pytest.raises(ConfigurationError):
        make_jump_spec([{"mark": 1.0, "weight": 1.0}], ConstantIntensity((2.0,)), 1.0)


def test_runtime_bound_violation():
    class Rogue:
        bound = None
        lower = None
        state_free = False

        def __call__(self, t, state=None):
            return np.array([5.0])

    spec = make_jump_spec([{"mark": 1.0, "weight": 1.0}], Rogue(), 1.0)
    with pytest.raises(ModelViolationError):
        simulate_jump_measure(build_time_grid(1.0, 2), spec, 1, 10, 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.99), st.floats(-5, 5))
def test_state_scaled_stays_in_bounds(scale, x):
    z = StateScaledIntensity((0.3, 0.7), scale, "common_loss")
    vals = z(0.0, {"common_loss": np.array([[x]])})
    assert np.all(vals >= 0) and np.all(vals <= z.bound + 1e-12)
