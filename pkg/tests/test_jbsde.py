import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfgjump.basis import build_time_grid, bundle_state, make_jump_spec, no_jumps, simulate_bundle
from mfgjump.errors import ConfigurationError, SolverError
from mfgjump.jbsde import (
    AUXILIARY,
    SINGLE_AGENT,
    BasisSpec,
    FeatureMap,
    GeneratorSpec,
    _lstsq,
    g_alpha,
    solve_lattice,
    solve_lsmc,
)
from mfgjump.lattice import build_lattice
from mfgjump.market import constant_market
from mfgjump.oracle import enumerate_jump_paths
from mfgjump.stats import estimate


def jump_lattice(n=4, weights=(1.0,), splits=("common",), phi=0.0):
    spec = make_jump_spec([{"mark": 1.0, "weight": w, "split": s} for w, s in zip(weights, splits)])
    return build_lattice(build_time_grid(1.0, n), constant_market(phi), spec), spec


# ----------------------------------------------------------------- generator


@given(st.floats(0.1, 10), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 5), st.floats(-1, 1))
def test_single_agent_drift_formula(alpha, z, u, rate, phi):
    gen = GeneratorSpec(SINGLE_AGENT, alpha)
    got = gen.drift(np.array([z]), np.array([u]), np.array([rate]), np.array([phi]))
    g = (np.exp(alpha * u) - 1 - alpha * u) / alpha
    assert np.isclose(got, z * phi + phi**2 / (2 * alpha) - g * rate, rtol=1e-10, atol=1e-12)


@given(st.floats(0.1, 10), st.floats(-1, 1))
def test_zero_points(alpha, phi):
    assert np.isclose(GeneratorSpec(SINGLE_AGENT, alpha).zero_point(np.array([phi])), phi**2 / (2 * alpha))
    assert GeneratorSpec(AUXILIARY, alpha).zero_point() == 0.0
    assert GeneratorSpec(SINGLE_AGENT, alpha).zero_point(np.array([0.0])) == 0.0


@given(st.floats(0.1, 10), st.floats(-20, 20))
def test_g_alpha_nonnegative_and_clamped(alpha, u):
    assert g_alpha(u, alpha) >= 0
    assert g_alpha(u, alpha, 1.0) == g_alpha(np.clip(u, -1, 1), alpha)


def test_generator_validation_and_default_truncation():
    with pytest.raises(ConfigurationError):
        GeneratorSpec(SINGLE_AGENT, 0.0)
    with pytest.raises(ConfigurationError):
        GeneratorSpec("other", 1.0)
    assert GeneratorSpec(SINGLE_AGENT, 2.0).u_max == 25.0
    assert np.isfinite(g_alpha(1e6, 2.0, GeneratorSpec(SINGLE_AGENT, 2.0).u_max))


# ------------------------------------------------------------------- lattice


def test_null_solution():
    m, _ = jump_lattice()
    sol = solve_lattice(GeneratorSpec(SINGLE_AGENT, 1.0), np.zeros(m.shape), m)
    assert np.all(sol.Y == 0) and np.all(sol.Z == 0) and np.all(sol.U == 0)


def test_deterministic_merton_value():
    m = build_lattice(build_time_grid(1.0, 8), constant_market(0.2), no_jumps())
    sol = solve_lattice(GeneratorSpec(SINGLE_AGENT, 2.0), 0.0, m)
    assert abs(sol.y0 + 0.01) < 1e-12
    assert np.all(sol.Z == 0)
    assert np.allclose(sol.theta_star(), 0.1)


def test_jump_indicator_matches_path_enumeration():
    m, _ = jump_lattice(4)
    sol = solve_lattice(GeneratorSpec(SINGLE_AGENT, 1.0), lambda f: (f["counts"][0] >= 1).astype(float), m)
    ref = enumerate_jump_paths(4, 0.25, 1.0, lambda c: (c >= 1).astype(float))
    assert abs(sol.y0 - ref) < 1e-8


@pytest.mark.parametrize("split", ["common", "idiosyncratic"])
def test_enumeration_agrees_for_either_split(split):
    m, _ = jump_lattice(5, weights=(0.8,), splits=(split,))
    term = lambda c: np.minimum(c, 2) * 0.7  # noqa: E731
    sol = solve_lattice(GeneratorSpec(SINGLE_AGENT, 1.5), lambda f: term(f["counts"][0]), m)
    assert abs(sol.y0 - enumerate_jump_paths(5, 0.8 / 5, 1.5, term)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_terminal_anchor_monotonicity_and_u_bound(seed):
    m, _ = jump_lattice(5, weights=(0.5, 0.7), splits=("common", "idiosyncratic"), phi=0.3)
    rng = np.random.default_rng(seed)
    xi = rng.uniform(-1, 1, m.shape)
    bump = rng.uniform(0, 1, m.shape)
    gen = GeneratorSpec(SINGLE_AGENT, 1.3)
    a = solve_lattice(gen, xi, m)
    b = solve_lattice(gen, xi + bump, m)
    assert a.diagnostics["terminal_mismatch"] == 0.0
    assert np.array_equal(a.Y[-1], xi)
    assert b.y0 >= a.y0
    assert a.diagnostics["max_abs_u"] <= 2 * a.diagnostics["terminal_oscillation"] + 1e-12


def test_exact_one_step_representation():
    """Y_{i+1} - E_i[Y_{i+1}] is reproduced by Z dW + U (dN - p) on every path."""
    m, _ = jump_lattice(4, weights=(0.5, 0.7), splits=("common", "idiosyncratic"), phi=0.2)
    rng = np.random.default_rng(0)
    sol = solve_lattice(GeneratorSpec(SINGLE_AGENT, 1.0), rng.uniform(0, 1, m.shape), m)
    b = m.sample_paths(500, 1, 1)
    pv = sol.along(b)
    rates = pv.probs / m.grid.dt
    f = GeneratorSpec(SINGLE_AGENT, 1.0).drift(pv.Z, pv.U, rates, np.full_like(pv.Z, 0.2))
    mart = pv.Z[..., 0] * b.dW[..., 0] + np.sum(pv.U * (pv.jumps - pv.probs), axis=-1)
    assert np.allclose(np.diff(pv.Y, axis=1), f * m.grid.dt + mart, atol=1e-12)


def test_non_finite_terminal_is_a_solver_error():
    m, _ = jump_lattice()
    xi = np.zeros(m.shape)
    xi[m.origin()[0], 0] = np.nan
    with pytest.raises(SolverError):
        solve_lattice(GeneratorSpec(SINGLE_AGENT, 1.0), xi, m)


def test_overflowing_recursion_reports_cell():
    m, _ = jump_lattice(3, weights=(2.0,))
    with pytest.raises(SolverError, match=r"\(cell \d\)"):
        solve_lattice(GeneratorSpec(SINGLE_AGENT, 1.0, u_max=1e6), lambda f: 1000.0 * f["counts"][0], m)


def test_bmo_energy_of_brownian_claim():
    m = build_lattice(build_time_grid(1.0, 6), constant_market(0.0), no_jumps())
    sol = solve_lattice(GeneratorSpec(SINGLE_AGENT, 1.0), lambda f: 0.5 * f["w"], m)
    # Z = 0.5 everywhere, so the conditional tail energy is 0.25 T
    assert np.isclose(sol.diagnostics["bmo_energy"], 0.25)


# ---------------------------------------------------------------------- lsmc


def _lsmc(grid, spec, phi, terminal_fn, P, seed, degree=2, claim_features=None):
    b = simulate_bundle(grid, spec, 1, P, 1, seed)
    xi = terminal_fn(bundle_state(b, grid.n_steps, spec.loss_sizes))
    fm = FeatureMap(spec, 1, claim_features, (), degree=degree)
    phis = np.full(b.dW.shape, phi)
    return solve_lsmc(GeneratorSpec(SINGLE_AGENT, 2.0), xi, b, spec, phis, fm, BasisSpec(degree=degree))


def test_lsmc_constant_terminal():
    g = build_time_grid(1.0, 4)
    sol = _lsmc(g, no_jumps(), 0.0, lambda s: np.full(s["w"].shape[:2], 0.3), 2000, 1)
    assert np.allclose(sol.Y, 0.3)
    assert np.max(np.abs(sol.Z)) < 1e-12
    assert sol.diagnostics["terminal_mismatch"] == 0.0


def test_lsmc_deterministic_merton():
    g = build_time_grid(1.0, 8)
    sol = _lsmc(g, no_jumps(), 0.2, lambda s: np.zeros(s["w"].shape[:2]), 100_000, 2)
    assert abs(sol.y0 + 0.01) < 2e-3


def test_lsmc_matches_lattice_on_lattice_paths():
    """Both backends solve the same discrete model when LSMC runs on lattice paths.

    A state one-hot basis makes the regressions exact up to sampling; the
    standard error comes from independent replications.
    """
    m, spec = jump_lattice(4, weights=(0.2,), phi=0.2)
    n = m.n_steps

    def claim(w, cl):
        return np.minimum(np.maximum(0.25 * cl + 0.25 * np.maximum(-w, 0.0), 0.0), 1.0)

    lat = solve_lattice(GeneratorSpec(SINGLE_AGENT, 2.0), claim(m.features()["w"], m.features()["common_loss"]), m)

    def onehot(state):
        key = (np.rint(state["w"][..., 0] / m.step).astype(int) + n) * (n + 1) + state["common_counts"][..., 0]
        return [(key == v).astype(float) for v in range((2 * n + 1) * (n + 1))]

    ys = []
    for seed in range(12):
        b = m.sample_paths(20_000, 1, seed)
        s = bundle_state(b, n, spec.loss_sizes)
        fm = FeatureMap(spec, 1, onehot, (), degree=1)
        sol = solve_lsmc(GeneratorSpec(SINGLE_AGENT, 2.0), claim(s["w"][..., 0], s["common_loss"]), b, spec,
                         np.full(b.dW.shape, 0.2), fm, BasisSpec(degree=1))
        ys.append(sol.y0)
    e = estimate(np.array(ys))
    assert abs(e.mean - lat.y0) <= 3 * e.se


@pytest.mark.slow
def test_lsmc_variance_shrinks_with_paths():
    g = build_time_grid(1.0, 4)
    spec = make_jump_spec([{"mark": 1.0, "weight": 0.5}])

    def term(s):
        return np.minimum(0.5 * s["common_loss"] + 0.25 * np.maximum(-s["w"][..., 0], 0), 1.0)

    v = []
    for P in (2_000, 20_000):
        v.append(np.var([_lsmc(g, spec, 0.2, term, P, seed).y0 for seed in range(30)], ddof=1))
    assert 4 < v[0] / v[1] < 25


def test_ridge_fallback_is_logged(caplog):
    X = np.ones((50, 2))
    X[:, 1] = 1.0 + 1e-9 * np.arange(50)
    diag = {"ridge_fallbacks": []}
    with caplog.at_level(logging.WARNING, logger="mfgjump.jbsde"):
        beta = _lstsq(X, np.ones(50), 1e-8, diag, 3)
    assert diag["ridge_fallbacks"] == [3]
    assert "ridge fallback" in caplog.text
    assert np.all(np.isfinite(beta))


def test_lsmc_drops_collinear_columns():
    g = build_time_grid(1.0, 3)
    spec = make_jump_spec([{"mark": 1.0, "weight": 0.5}])
    # the claim feature duplicates the count column, so it must be removed without a fallback
    sol = _lsmc(g, spec, 0.1, lambda s: np.minimum(s["common_loss"], 1.0), 5000, 3,
                claim_features=lambda s: [s["common_counts"][..., 0]])
    assert sol.diagnostics["ridge_fallbacks"] == []
    assert np.all(np.isfinite(sol.Y))
