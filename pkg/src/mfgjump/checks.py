"""Invariant suites shared by the ``verify`` subcommand and the test-suite.

Every suite takes a :class:`~mfgjump.scenario.Scenario` and returns a list
of :class:`Check` records; a suite never raises on a failed comparison.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .basis import simulate_bundle
from .equilibrium import evaluate_lattice_population, solve_mfg_lattice
from .errors import ConfigurationError
from .jbsde import SINGLE_AGENT, BasisSpec, FeatureMap, GeneratorSpec, solve_lattice, solve_lsmc
from .lattice import build_lattice
from .market import phi_path
from .measure_change import TiltedIntensity, doleans_exponential, phat_expectation, simulate_under_phat
from .oracle import TinyModel, brute_force_single_agent, closed_form_merton, exponential_identity_residual
from .projection import AgentSample, ConstantLaw, TypeLaws, energy_surrogate, project_pi, project_wealth_integral, sample_types, type_moments
from .stats import estimate


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.suite}/{self.name}: {self.value:.6g} (threshold {self.threshold:.6g}) {self.detail}".rstrip()


def _le(suite, name, value, threshold, detail=""):
    value = float(value)
    return Check(suite, name, value, float(threshold), bool(value <= threshold), detail)


# --------------------------------------------------------------------------
# shared solves
# --------------------------------------------------------------------------


def lattice_equilibrium(sc, laws=None):
    """Lattice model and equilibrium with exact type moments."""
    laws = laws or sc.laws
    model = build_lattice(sc.grid, sc.market, sc.jumps)
    return model, solve_mfg_lattice(model, sc.claim, laws, type_moments(laws), u_max=sc.solver.u_max)


def stratified_types(eq, laws, M, seed) -> AgentSample:
    """Agents spread over the lattice type atoms in proportion to their weights.

    Counts use largest remainders, so the empirical type law equals the
    lattice one whenever ``M w`` is integral; ``x0`` is sampled from its law.
    """
    w = eq.types.weights
    raw = M * w
    counts = np.floor(raw).astype(int)
    short = M - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    idx = np.repeat(np.arange(w.size), counts)
    x0 = sample_types(laws, M, seed).x0
    return AgentSample(x0, eq.types.alpha[idx], eq.types.rho[idx])


def lattice_population(sc, model, eq, seed, workers=1, idio_seed=None):
    """Lattice-sampled population with stratified frozen types."""
    s = sc.solver
    types = stratified_types(eq, sc.laws, s.check_agents, seed)
    bundle = model.sample_paths(s.check_paths, s.check_agents, seed, workers=workers, idio_seed=idio_seed)
    return bundle, types


def lsmc_basis(sc) -> BasisSpec:
    return BasisSpec(degree=sc.solver.basis_degree, ridge=sc.solver.ridge)


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------


def closed_form_suite(sc, seed, workers=1, with_lsmc=True):
    """Closed-form equilibrium strategy and reference value (constant phi, no liability)."""
    out = []
    if sc.jumps.n_atoms or sc.claim.kind != "zero" or not sc.market.deterministic_phi or sc.market.d != 1:
        raise ConfigurationError("the closed-form suite needs constant phi, d = 1, no jumps and a zero claim")
    phi = float(sc.market.phi_at(0.0)[0])
    T = sc.grid.horizon
    model, eq = lattice_equilibrium(sc)
    mom = eq.moments
    reach = model.reachable()[:-1]
    for t, (a, r) in enumerate(zip(eq.types.alpha, eq.types.rho)):
        target = float(closed_form_merton(phi, a, r, mom.mean_rho, mom.mean_inv_alpha))
        err = np.max(np.abs(eq.theta_tilde[t][reach] - target))
        out.append(_le("closed_form", f"lattice_theta[alpha={a:g},rho={r:g}]", err, 1e-3, f"target {target:.6g}"))
        y0 = eq.references[t].y0
        out.append(_le("closed_form", f"lattice_y0[alpha={a:g}]", abs(y0 + phi**2 * T / (2 * a)), 1e-6,
                       f"Y0 {y0:.8g}"))
    if with_lsmc:
        from .equilibrium import solve_mfg_lsmc

        mc = solve_mfg_lsmc(sc.grid, sc.market, sc.jumps, sc.laws, sc.claim, sc.solver.paths, sc.solver.agents,
                            seed, lsmc_basis(sc), sc.solver.u_max, workers)
        types = mc.population.types
        # the finite population's own moments enter through the projection
        m = mc.moments
        th = mc.theta_tilde[..., 0]
        for a in np.unique(types.alpha):
            for r in np.unique(types.rho):
                sel = (types.alpha == a) & (types.rho == r)
                if not sel.any():
                    continue
                target = float(closed_form_merton(phi, a, r, m.mean_rho, m.mean_inv_alpha))
                e = estimate(th[:, sel].reshape(th.shape[0], -1), axis_clusters=True)
                dev = abs(e.mean - target)
                tol = max(3 * e.se, 1e-8)
                out.append(_le("closed_form", f"lsmc_theta[alpha={a:g},rho={r:g}]", dev, tol,
                               f"mean {e.mean:.6g} se {e.se:.3g} paths {th.shape[0] * int(sel.sum())}"))
    return out


def oracle_suite(sc, seed=0, workers=1, rows=None):
    """Lattice BSDE against brute-force dynamic programming on a tiny tree.

    ``rows`` (a list) receives one record per tree node for CSV output.
    """
    if not isinstance(sc.laws.alpha, ConstantLaw) or not isinstance(sc.laws.rho, ConstantLaw):
        raise ConfigurationError("the oracle suite needs constant alpha and rho")
    model = build_lattice(sc.grid, sc.market, sc.jumps)
    alpha = float(sc.laws.alpha.value)
    rho = float(sc.laws.rho.value)
    if not sc.claim.common_measurable and rho != 0:
        raise ConfigurationError("the oracle suite needs rho = 0 or a common-noise claim")
    o = sc.oracle
    tiny = TinyModel(sc.grid.horizon, sc.grid.n_steps, float(model.phi[0]), tuple(model.probs),
                     tuple(bool(c) for c in model.common), o.theta_step, o.theta_min, o.theta_max)
    if np.ptp(model.phi) > 0:
        raise ConfigurationError("the oracle suite needs a constant market price of risk")
    common = model.common
    loss = model.loss_sizes

    def claim(w, counts):
        cl = counts[:, common] @ loss[common]
        il = counts[:, ~common] @ loss[~common]
        return (1.0 - rho) * sc.claim.payoff(w, cl, il)

    bf = brute_force_single_agent(tiny, claim, alpha, o.x0)
    B = (1.0 - rho) * sc.claim.on_lattice(model.features())
    sol = solve_lattice(GeneratorSpec(SINGLE_AGENT, alpha, sc.solver.u_max), B, model)
    th = sol.theta_star()
    n = model.n_steps
    worst = 0.0
    for i, (theta_dp, (W, counts)) in enumerate(zip(bf.theta, bf.states)):
        j = np.rint(W / model.step).astype(np.int64) + n
        idx = (np.full(j.shape, i), j) + tuple(counts.T)
        bsde = th[idx]
        worst = max(worst, float(np.max(np.abs(bsde - theta_dp))))
        if rows is not None:
            for node in range(W.size):
                rows.append((i, node, float(W[node]), *map(int, counts[node]), float(theta_dp[node]), float(bsde[node])))
    step = o.theta_step
    ce_gap = abs(bf.certainty_equivalent - sol.y0)
    return [
        _le("oracle", "certainty_equivalent", ce_gap, max(step, 1e-8),
            f"dp {bf.certainty_equivalent:.8g} bsde {sol.y0:.8g}"),
        _le("oracle", "theta_per_node", worst, step + 1e-9, f"{sum(s[0].size for s in bf.states)} nodes"),
    ]


def identity_suite(sc, seed, workers=1):
    """Per-path exponential identity at the optimal strategy on lattice paths."""
    model, eq = lattice_equilibrium(sc)
    bundle = model.sample_paths(sc.solver.check_paths, 1, seed, workers=workers)
    dt = sc.grid.dt
    phi = np.broadcast_to(model.phi[None, :, None], bundle.dW.shape)
    out = []
    for ref, a in zip(eq.references, eq.types.alpha):
        pv = ref.along(bundle)
        theta = pv.Z + phi / a
        res = exponential_identity_residual(theta, pv.Y[:, 0], pv.Z, pv.U, phi, bundle.dW, pv.jumps, pv.probs,
                                            a, pv.Y[:, -1], dt)
        out.append(_le("identity", f"residual[alpha={a:g}]", np.max(res), 1e-8, f"{bundle.n_paths} paths"))
    return out


def measure_change_suite(sc, seed, workers=1):
    """Density positivity and unit mean, and reweighting against tilted simulation."""
    grid, market, spec = sc.grid, sc.market, sc.jumps
    P = sc.solver.paths
    types = sample_types(sc.laws, 1, seed)
    alpha = float(types.alpha[0])
    bundle = simulate_bundle(grid, spec, market.d, P, 1, seed, extra_state=types.state(), workers=workers)
    from .basis import bundle_state

    final = bundle_state(bundle, grid.n_steps, spec.loss_sizes, types.state())
    xi = (1.0 - types.rho[0]) * sc.claim.on_state(final)
    fmap = FeatureMap(spec, market.d, sc.claim.regression_features, (), degree=sc.solver.basis_degree)
    phi = phi_path(market, bundle)
    ref = solve_lsmc(GeneratorSpec(SINGLE_AGENT, alpha, sc.solver.u_max), xi, bundle, spec, phi, fmap,
                     lsmc_basis(sc), types.state())
    jumps = bundle.common_counts + bundle.idio_counts[:, 0]
    dens = doleans_exponential(phi, ref.U[:, 0], bundle.dW, jumps, ref.probs[:, 0], alpha, grid.dt)
    rep = dens.report()
    out = [
        Check("measure_change", "density_positive", float(np.mean(dens.values > 0)), 1.0,
              bool(rep["positive"]), "fraction of paths"),
    ]
    e = estimate(dens.terminal)
    out.append(_le("measure_change", "density_mean", abs(e.mean - 1.0), 4 * e.se, f"mean {e.mean:.6g} se {e.se:.3g}"))

    hstate = {k: np.full((P, 1), float(getattr(types, k)[0])) for k in ("x0", "alpha", "rho")}
    if spec.n_atoms:
        u_bound = max(float(np.max(np.abs(ref.U))), 1e-12)
        zeta_hat = TiltedIntensity(spec.zeta, lambda cell, st: ref.predict(cell, st)["u"], "alpha", u_bound,
                                   spec.c_nu * math.exp(alpha * u_bound))
        tilted = spec.with_zeta(zeta_hat, zeta_hat.c_nu)
    else:
        tilted = spec
    hb = simulate_under_phat(grid, market, tilted, P, seed + 1, extra_state=hstate, workers=workers)
    for name, fa, fb in _tilt_payoffs(bundle, hb, phi, grid.dt):
        a = phat_expectation(fa, dens)
        b = estimate(fb)
        gap = abs(a.mean - b.mean)
        tol = 4 * math.hypot(a.se, b.se)
        out.append(_le("measure_change", f"reweight_vs_tilted[{name}]", gap, tol,
                       f"reweighted {a.mean:.6g} tilted {b.mean:.6g}"))
    return out


def _tilt_payoffs(bundle, hb, phi, dt):
    """Payoffs evaluated on the reference paths and on the tilted paths."""
    out = []
    wh_a = np.sum(bundle.dW[..., 0] + phi[..., 0] * dt, axis=1)
    phi_h = np.broadcast_to(phi[:1], hb.dW.shape)
    wh_b = np.sum(hb.dW[..., 0] + phi_h[..., 0] * dt, axis=1)
    out.append(("w_hat_T", wh_a, wh_b))
    out.append(("w_hat_T_squared", wh_a**2, wh_b**2))
    ja = bundle.common_counts + bundle.idio_counts[:, 0]
    jb = hb.common_counts + hb.idio_counts[:, 0]
    for k in range(ja.shape[-1]):
        out.append((f"count_atom{k}", ja[..., k].sum(axis=1), jb[..., k].sum(axis=1)))
        out.append((f"any_atom{k}", (ja[..., k].sum(axis=1) > 0).astype(float), (jb[..., k].sum(axis=1) > 0).astype(float)))
    return out


def projection_suite(sc, seed, workers=1):
    """Idempotence, linearity, the wealth-integral identity and the energy bound for Pi."""
    model, eq = lattice_equilibrium(sc)
    bundle, types = lattice_population(sc, model, eq, seed, workers)
    bundle_b = model.sample_paths(sc.solver.check_paths, sc.solver.check_agents, seed, workers=workers,
                                  idio_seed=seed + 7919)
    ev_a = evaluate_lattice_population(eq, bundle, types)
    ev_b = evaluate_lattice_population(eq, bundle_b, types)
    M = types.size
    theta = ev_a.theta_tilde[..., None]  # (P, M, n, 1)
    out = []

    pi = project_pi(theta)
    again = project_pi(pi.broadcast(M))
    scale = max(1.0, float(np.max(np.abs(pi.values))))
    idem = float(np.max(np.abs(again.values - pi.values))) / scale
    out.append(_le("projection", "idempotence", idem, 1e-15, "relative, max over cells"))

    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(2)
    other = ev_a.theta_b[..., None] * np.tanh(bundle.w_levels()[:, None, :-1, :])
    lin = project_pi(a * theta + b * other).values - (a * pi.values + b * project_pi(other).values)
    out.append(_le("projection", "linearity", float(np.max(np.abs(lin))) / scale, 1e-14, "relative, max over cells"))

    # wealth integral: left side from population B, right side projects population A on the same common paths
    lhs_b, _ = project_wealth_integral(ev_b.theta_tilde[..., None], ev_b.d_w_hat[..., None])
    _, rhs_a = project_wealth_integral(theta, ev_a.d_w_hat[..., None])
    e = estimate(lhs_b - rhs_a)
    out.append(_le("projection", "wealth_integral", abs(e.mean), max(4 * e.se, 1e-12), f"mean {e.mean:.3g} se {e.se:.3g}"))

    dt = sc.grid.dt
    ez = energy_surrogate(theta, dt)
    epi = energy_surrogate(pi.values, dt)
    out.append(_le("projection", "energy", epi.mean - ez.mean, max(3 * ez.se, 1e-12),
                   f"pi {epi.mean:.6g} z {ez.mean:.6g} se {ez.se:.3g}"))
    return out


def fixed_point_suite(sc, seed, workers=1):
    """Mean-field consistency and the deviation test on a lattice-sampled population."""
    model, eq = lattice_equilibrium(sc)
    bundle, types = lattice_population(sc, model, eq, seed, workers)
    ev = evaluate_lattice_population(eq, bundle, types)
    r = ev.mean_field_residual()
    out = [
        _le("fixed_point", "mean_field", abs(r.mean), max(4 * r.se, 1e-12), f"mean {r.mean:.3g} se {r.se:.3g}"),
        _le("fixed_point", "best_response_gap", eq.diagnostics["best_response_gap_max"], 1e-10),
    ]
    for d in ev.deviation():
        out.append(Check("fixed_point", f"deviation[{d.direction},{d.eps:+g}]", d.gap.mean, 2 * d.gap.se,
                         d.passed, f"se {d.gap.se:.3g}"))
    return out


def degeneracy_suite(sc, seed=0, workers=1):
    """No-interaction limit, rejection of E[rho] = 1 and the reconstruction round trip."""
    from .scenario import CITE_MEAN_RHO, ScenarioError, parse_scenario

    out = []
    laws0 = TypeLaws(sc.laws.x0, sc.laws.alpha, ConstantLaw(0.0))
    _, eq0 = lattice_equilibrium(sc, laws0)
    same = bool(np.array_equal(eq0.theta_tilde, eq0.theta_b))
    out.append(Check("degeneracy", "rho_zero_theta_equals_theta_b",
                     float(np.max(np.abs(eq0.theta_tilde - eq0.theta_b))), 0.0, same, "exact equality"))

    doc = copy.deepcopy(sc.raw)
    doc.setdefault("population", {})["rho"] = {"law": "constant", "value": 1.0}
    try:
        parse_scenario(doc, sc.source or sc.name)
        out.append(Check("degeneracy", "mean_rho_one_rejected", 0.0, 1.0, False, "scenario accepted"))
    except ScenarioError as e:
        cited = any(CITE_MEAN_RHO in m for m in e.errors)
        out.append(Check("degeneracy", "mean_rho_one_rejected", 1.0, 1.0, cited,
                         "cites E[rho] != 1" if cited else "missing citation"))

    _, eq = lattice_equilibrium(sc)
    # the lattice projection is exact, so its standard error is zero; 1e-12 absorbs rounding
    out.append(_le("degeneracy", "roundtrip", eq.diagnostics["roundtrip_max"], 1e-12, "lattice"))
    return out


SUITE_FUNCS = {
    "closed_form": closed_form_suite,
    "oracle": oracle_suite,
    "identity": identity_suite,
    "measure_change": measure_change_suite,
    "projection": projection_suite,
    "fixed_point": fixed_point_suite,
    "degeneracy": degeneracy_suite,
}


def run_suites(sc, seed, workers=1, suites=None):
    out = []
    for name in suites if suites is not None else sc.verification:
        out.extend(SUITE_FUNCS[name](sc, seed, workers))
    return out
