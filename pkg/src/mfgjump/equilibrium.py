"""Mean-field equilibrium of the exponential-utility investment game.

Pipeline: solve the single-agent JBSDE with terminal ``B - rho E[B | F_T^0]``
for ``(Y^B, Z^B, U^B)`` and ``theta^B = Z^B + phi / alpha``; solve the
auxiliary JBSDE under the tilted measure with terminal ``rho E[x0]``; then
reconstruct

    Z = Z_tilde + rho (Pi(Z_tilde) + E[rho] Pi(theta^B)) / (1 - E[rho]) + rho Pi(theta^B),
    theta_tilde = Z + theta^B.

Two drivers are provided: :func:`solve_mfg_lattice` (exact moments and exact
conditional expectations on the recombining lattice) and
:func:`solve_mfg_lsmc` (simulated population with regression).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, SingularityError
from .jbsde import AUXILIARY, SINGLE_AGENT, GeneratorSpec, solve_lattice, tilted_probabilities
from .lattice import agent_indices, lattice_pi
from .stats import Estimate, estimate

CLAIM_KINDS = ("zero", "constant", "stoploss", "indicator")


# --------------------------------------------------------------------------
# claims
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClaimSpec:
    """Bounded terminal liability.

    ``stoploss``: ``min((w_common L0 + w_idio L1 + w_brownian max(-W_T, 0) - k1)^+, k2)``
    with ``L0``, ``L1`` the accumulated common and idiosyncratic losses.
    ``indicator``: ``amount * 1{L >= level}`` for ``L`` one of common, idio or total loss.
    """

    kind: str = "zero"
    value: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    w_common: float = 1.0
    w_idio: float = 1.0
    w_brownian: float = 0.0
    level: float = 1.0
    amount: float = 1.0
    loss: str = "total"

    def __post_init__(self):
        if self.kind not in CLAIM_KINDS:
            raise ConfigurationError(
                f"claim kind {self.kind!r} is not a bounded form; choose one of {', '.join(CLAIM_KINDS)}"
            )
        if self.kind == "stoploss" and not (math.isfinite(self.k2) and self.k2 > 0):
            raise ConfigurationError("stop-loss claims need a finite cap k2 > 0 (the claim must be bounded)")
        if self.kind == "constant" and not math.isfinite(self.value):
            raise ConfigurationError("constant claim must be finite")
        if self.loss not in ("common", "idio", "total"):
            raise ConfigurationError("indicator loss must be common, idio or total")

    @property
    def bound(self) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return abs(self.value)
        if self.kind == "stoploss":
            return self.k2
        return abs(self.amount)

    @property
    def reads(self) -> frozenset:
        if self.kind in ("zero", "constant"):
            return frozenset()
        if self.kind == "stoploss":
            out = set()
            if self.w_common:
                out.add("common")
            if self.w_idio:
                out.add("idio")
            if self.w_brownian:
                out.add("brownian")
            return frozenset(out)
        return frozenset({"common", "idio"} if self.loss == "total" else {self.loss})

    @property
    def common_measurable(self) -> bool:
        return "idio" not in self.reads

    def payoff(self, w, common_loss, idio_loss) -> np.ndarray:
        """Claim value from the first Brownian coordinate and the two loss totals."""
        w, cl, il = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (w, common_loss, idio_loss)))
        if self.kind == "zero":
            out = np.zeros(w.shape)
        elif self.kind == "constant":
            out = np.full(w.shape, float(self.value))
        elif self.kind == "stoploss":
            x = self.w_common * cl + self.w_idio * il + self.w_brownian * np.maximum(-w, 0.0) - self.k1
            out = np.minimum(np.maximum(x, 0.0), self.k2)
        else:
            L = {"common": cl, "idio": il, "total": cl + il}[self.loss]
            out = self.amount * (L >= self.level - 1e-12)
        if np.any(np.abs(out) > self.bound + 1e-12):
            raise ConfigurationError("claim exceeds its declared bound")
        return out

    def on_state(self, state) -> np.ndarray:
        """Claim evaluated on a simulation state dict (shape (P, M))."""
        return self.payoff(state["w"][..., 0], state["common_loss"], state["idio_loss"])

    def on_lattice(self, features) -> np.ndarray:
        return self.payoff(features["w"], features["common_loss"], features["idio_loss"])

    def regression_features(self, state) -> list:
        """Intrinsic claim value as an extra regression feature."""
        if self.kind in ("zero", "constant"):
            return []
        return [self.on_state(state)]


# --------------------------------------------------------------------------
# algebra shared by both backends
# --------------------------------------------------------------------------


def value_function(x, y0, alpha):
    """``-exp(-alpha (x - Y_0))``."""
    return -np.exp(-np.asarray(alpha) * (np.asarray(x) - np.asarray(y0)))


def check_mean_rho(mean_rho: float) -> None:
    if math.isclose(mean_rho, 1.0, abs_tol=1e-12):
        raise SingularityError("equilibrium requires E[rho] != 1; the reconstruction divides by 1 - E[rho]")


def reconstruct(z_tilde, theta_b, rho, pi_z_tilde, pi_theta_b, mean_rho):
    """Equilibrium ``Z`` and ``theta_tilde`` from the auxiliary and reference solutions.

    All arrays broadcast together; ``pi_*`` are the projections (common
    processes) and ``rho`` the agent's relative-performance weight.
    """
    check_mean_rho(mean_rho)
    Z = z_tilde + rho * (pi_z_tilde + mean_rho * pi_theta_b) / (1.0 - mean_rho) + rho * pi_theta_b
    return Z, Z + theta_b


def closed_form_theta(phi, alpha, rho, mean_rho, mean_inv_alpha):
    """``theta_tilde = phi (1/alpha + rho E[1/alpha] / (1 - E[rho]))`` for B = 0 and constant phi."""
    check_mean_rho(mean_rho)
    return np.asarray(phi) * (1.0 / np.asarray(alpha) + np.asarray(rho) * mean_inv_alpha / (1.0 - mean_rho))


# --------------------------------------------------------------------------
# deviation test
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviationResult:
    direction: str
    eps: float
    gap: Estimate  # utility(theta + eps h) - utility(theta)

    @property
    def passed(self) -> bool:
        return self.gap.mean <= 2.0 * self.gap.se + 1e-15


def canned_directions(bundle, horizon: float) -> dict:
    """Predictable perturbation directions of shape (P, M, n).

    constant, time ramp, Brownian level, common-jump indicator and
    idiosyncratic-jump indicator, all read at the left endpoint of each cell.
    """
    P, M, n = bundle.n_paths, bundle.n_agents, bundle.grid.n_steps
    t = bundle.grid.nodes[:-1]
    W = bundle.w_levels()[:, :-1, 0]
    cc = np.cumsum(bundle.common_counts.sum(axis=-1), axis=1) - bundle.common_counts.sum(axis=-1)
    ic = np.cumsum(bundle.idio_counts.sum(axis=-1), axis=2) - bundle.idio_counts.sum(axis=-1)
    shape = (P, M, n)
    return {
        "constant": np.ones(shape),
        "time": np.broadcast_to(t / horizon, shape),
        "brownian": np.broadcast_to(np.tanh(W / math.sqrt(horizon))[:, None, :], shape),
        "common_jump": np.broadcast_to((cc > 0)[:, None, :].astype(float), shape),
        "idio_jump": (ic > 0).astype(float),
    }


def deviation_test(theta, d_w_hat, x0, alpha, rho, liability, directions: dict, eps=(-0.1, -0.05, 0.05, 0.1)):
    """Paired Monte Carlo utility gaps for ``theta + eps h``.

    ``theta`` and each ``h`` are (P, M, n) for one asset, ``d_w_hat`` (P, n),
    ``liability`` (P, M) the total terminal liability ``B + rho F`` and
    ``x0``, ``alpha``, ``rho`` per agent.  Standard errors are clustered by
    common path.
    """
    alpha = np.asarray(alpha, dtype=float)
    x0 = np.asarray(x0, dtype=float)

    def utility(th):
        X = x0 + np.einsum("pmn,pn->pm", th, d_w_hat)
        return -np.exp(-alpha * (X - liability))

    base = utility(theta)
    out = []
    for name, h in directions.items():
        for e in eps:
            out.append(DeviationResult(name, float(e), estimate(utility(theta + e * h) - base, axis_clusters=True)))
    return out


# --------------------------------------------------------------------------
# lattice driver
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeTypes:
    """Finite type atoms ``(alpha, rho)`` with probabilities."""

    alpha: np.ndarray
    rho: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.alpha.shape[0]


def lattice_types(laws, alpha_samples: np.ndarray | None = None) -> LatticeTypes:
    """Product of the alpha and rho atoms; a continuous alpha law uses its samples as equal-weight atoms."""
    at = laws.alpha.atoms()
    if at is None:
        if alpha_samples is None:
            raise ConfigurationError("a continuous risk-aversion law needs sampled types on the lattice")
        av, aw = np.asarray(alpha_samples, dtype=float), np.full(len(alpha_samples), 1.0 / len(alpha_samples))
    else:
        av, aw = at
    rv, rw = laws.rho.atoms()
    A, R = np.meshgrid(np.arange(len(av)), np.arange(len(rv)), indexing="ij")
    w = (aw[A] * rw[R]).reshape(-1)
    keep = w > 0
    return LatticeTypes(av[A].reshape(-1)[keep], rv[R].reshape(-1)[keep], w[keep])


@dataclass(frozen=True)
class LatticeEquilibrium:
    """Dense lattice equilibrium; per-type arrays have a leading type axis."""

    model: object
    types: LatticeTypes
    moments: object
    claim_values: np.ndarray  # B over terminal states
    claim_projection: np.ndarray  # E[B | F_T^0] over terminal states
    references: tuple  # single-agent LatticeSolution per type
    auxiliaries: tuple  # auxiliary LatticeSolution per type
    theta_b: np.ndarray  # (T, n, *S)
    z_tilde: np.ndarray
    Z: np.ndarray
    theta_tilde: np.ndarray
    pi_theta_b: np.ndarray  # (n, *S)
    pi_z_tilde: np.ndarray
    pi_theta_tilde: np.ndarray
    marginals: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def type_of(self, alpha, rho) -> np.ndarray:
        """Index of the type atom matching each ``(alpha, rho)`` pair."""
        a = np.asarray(alpha)[..., None]
        r = np.asarray(rho)[..., None]
        hit = np.isclose(a, self.types.alpha) & np.isclose(r, self.types.rho)
        if not np.all(hit.any(axis=-1)):
            raise ConfigurationError("agent type is not one of the lattice type atoms")
        return np.argmax(hit, axis=-1)


def _pi_all(model, marginals, arr):
    return np.stack([lattice_pi(model, marginals, i, arr[i]) for i in range(arr.shape[0])])


def solve_reference_single_agent_lattice(model, claim: ClaimSpec, types: LatticeTypes, u_max=None):
    """Reference JBSDE per type with terminal ``B - rho E[B | F_T^0]``."""
    marg = model.idio_marginals()
    B = claim.on_lattice(model.features())
    piB = lattice_pi(model, marg, model.n_steps, B)
    refs = []
    for a, r in zip(types.alpha, types.rho):
        refs.append(solve_lattice(GeneratorSpec(SINGLE_AGENT, float(a), u_max), B - r * piB, model))
    return tuple(refs), B, piB, marg


def solve_auxiliary_lattice(model, references, types: LatticeTypes, mean_x0: float, u_max=None):
    """Auxiliary JBSDE per type on the tilted lattice with terminal ``rho E[x0]``."""
    out = []
    for ref, a, r in zip(references, types.alpha, types.rho):
        probs = tilted_probabilities(ref)
        out.append(solve_lattice(GeneratorSpec(AUXILIARY, float(a), u_max), r * mean_x0, model, probs=probs))
    return tuple(out)


def solve_mfg_lattice(model, claim: ClaimSpec, laws, moments, alpha_samples=None, u_max=None) -> LatticeEquilibrium:
    """Full equilibrium on the lattice with exact moments and exact projections."""
    check_mean_rho(moments.mean_rho)
    types = lattice_types(laws, alpha_samples)
    refs, B, piB, marg = solve_reference_single_agent_lattice(model, claim, types, u_max)
    auxs = solve_auxiliary_lattice(model, refs, types, moments.mean_x0, u_max)
    w = types.weights.reshape((-1,) + (1,) * (1 + len(model.shape)))
    rho = types.rho.reshape(w.shape)
    theta_b = np.stack([ref.theta_star() for ref in refs])
    z_tilde = np.stack([aux.Z for aux in auxs])
    pi_tb = _pi_all(model, marg, np.sum(w * theta_b, axis=0))
    pi_zt = _pi_all(model, marg, np.sum(w * z_tilde, axis=0))
    Z, theta_tilde = reconstruct(z_tilde, theta_b, rho, pi_zt, pi_tb, moments.mean_rho)
    pi_tt = _pi_all(model, marg, np.sum(w * theta_tilde, axis=0))

    # round trip of the reconstruction with the same projection operator
    pi_z_tb = _pi_all(model, marg, np.sum(w * (Z + theta_b), axis=0))
    roundtrip = z_tilde - (Z - rho * pi_z_tb)
    reach = model.reachable()[:-1]
    # best response to the mean field generated by theta_tilde: adding
    # rho (E[x0] + int Pi(theta_tilde) dW_hat) to the terminal shifts Z^B by
    # rho Pi(theta_tilde) and leaves U^B unchanged
    phi = model.phi.reshape((1, -1) + (1,) * len(model.shape))
    alpha = types.alpha.reshape(w.shape)
    z_br = np.stack([ref.Z for ref in refs]) + rho * pi_tt
    gap = theta_tilde - z_br - phi / alpha
    diag = {
        "roundtrip_max": float(np.max(np.abs(roundtrip[:, reach]))),
        "best_response_gap_max": float(np.max(np.abs(gap[:, reach]))),
        # sum_i |gap_i|^2 dt along any path is at most T max|gap|^2
        "best_response_exponent_max": float(np.max(np.abs(gap[:, reach])) ** 2 * model.grid.horizon),
        "aux_y0": [aux.y0 for aux in auxs],
        "aux_max_abs_z": float(max(np.max(np.abs(aux.Z[reach])) for aux in auxs)),
        "aux_max_abs_u": float(max(aux.diagnostics["max_abs_u"] for aux in auxs)),
        "reference_y0": [ref.y0 for ref in refs],
    }
    return LatticeEquilibrium(
        model, types, moments, B, piB, refs, auxs, theta_b, z_tilde, Z, theta_tilde, pi_tb, pi_zt, pi_tt, marg, diag
    )


@dataclass(frozen=True)
class PopulationEvaluation:
    """Equilibrium strategies and wealth on a sampled population.

    ``theta`` arrays are (P, M, n) for one asset; ``mean_field`` is the model
    value of ``F = E[X_T - B | F_T^0]`` per common path.
    """

    bundle: object
    types: object
    theta_tilde: np.ndarray
    theta_b: np.ndarray
    d_w_hat: np.ndarray
    wealth_T: np.ndarray
    claim: np.ndarray
    mean_field: np.ndarray

    def mean_field_residual(self) -> Estimate:
        """Cross-agent average of ``X_T - B`` minus the model mean field, clustered by common path."""
        d = (self.wealth_T - self.claim).mean(axis=1) - self.mean_field
        return estimate(d)

    def deviation(self, directions: dict | None = None, eps=(-0.1, -0.05, 0.05, 0.1)):
        if directions is None:
            directions = canned_directions(self.bundle, self.bundle.grid.horizon)
        liability = self.claim + self.types.rho[None, :] * self.mean_field[:, None]
        return deviation_test(
            self.theta_tilde, self.d_w_hat, self.types.x0[None, :], self.types.alpha[None, :],
            self.types.rho[None, :], liability, directions, eps,
        )


def evaluate_lattice_population(eq: LatticeEquilibrium, bundle, types) -> PopulationEvaluation:
    """Read the lattice equilibrium along a lattice-sampled population."""
    model = eq.model
    n = model.n_steps
    P, M = bundle.n_paths, bundle.n_agents
    tix = eq.type_of(types.alpha, types.rho)  # (M,)
    node, term = agent_indices(model, bundle)
    cells = np.broadcast_to(np.arange(n), (P, M, n))
    tt = np.broadcast_to(tix[None, :, None], (P, M, n))
    theta_tilde = eq.theta_tilde[(tt, cells) + node]
    theta_b = eq.theta_b[(tt, cells) + node]
    d_w_hat = bundle.dW[..., 0] + model.phi[None, :] * model.grid.dt
    wealth_T = types.x0[None, :] + np.einsum("pmn,pn->pm", theta_tilde, d_w_hat)
    claim = eq.claim_values[term]
    # projections are constant along idiosyncratic axes, so agent 0's index suffices
    node0 = tuple(a[:, 0] for a in node)
    term0 = tuple(a[:, 0] for a in term)
    pi_tt = eq.pi_theta_tilde[(cells[:, 0],) + node0]
    F = eq.moments.mean_x0 + np.sum(pi_tt * d_w_hat, axis=1) - eq.claim_projection[term0]
    return PopulationEvaluation(bundle, types, theta_tilde, theta_b, d_w_hat, wealth_T, claim, F)


# --------------------------------------------------------------------------
# Monte Carlo driver
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class McEquilibrium:
    """Equilibrium on a simulated population; strategy arrays are (P, M, n, d)."""

    population: object
    moments: object
    reference: object
    auxiliary: object
    tilted_bundle: object
    claim: np.ndarray  # (P, M)
    claim_projection: np.ndarray  # (P,)
    theta_b: np.ndarray
    z_tilde: np.ndarray
    Z: np.ndarray
    theta_tilde: np.ndarray
    pi_theta_b: object
    pi_theta_tilde: object
    d_w_hat: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def wealth_T(self) -> np.ndarray:
        return self.population.types.x0[None, :] + np.einsum("pmnd,pnd->pm", self.theta_tilde, self.d_w_hat)


def _type_keys(laws) -> tuple:
    return tuple(k for k in ("alpha", "rho") if k in laws.varying())


def solve_mfg_lsmc(
    grid,
    market,
    spec,
    laws,
    claim: ClaimSpec,
    n_paths: int,
    n_agents: int,
    seed: int,
    basis=None,
    u_max=None,
    workers: int = 1,
) -> McEquilibrium:
    """Equilibrium with a simulated population and regression-based conditional expectations."""
    from .basis import bundle_state, simulate_bundle
    from .jbsde import BasisSpec, FeatureMap, solve_lsmc
    from .market import phi_path
    from .measure_change import TiltedIntensity, simulate_under_phat
    from .projection import Moments, PopulationBundle, project_pi, sample_types

    basis = basis or BasisSpec()
    types = sample_types(laws, n_agents, seed)
    # moments of the sampled population, consistent with the cross-agent projection
    moments = Moments(float(np.mean(types.x0)), float(np.mean(types.rho)), float(np.mean(1.0 / types.alpha)))
    check_mean_rho(moments.mean_rho)
    bundle = simulate_bundle(grid, spec, market.d, n_paths, n_agents, seed, extra_state=types.state(), workers=workers)
    pop = PopulationBundle(bundle, types)
    n = grid.n_steps
    tstate = types.state()
    final = bundle_state(bundle, n, spec.loss_sizes, tstate)
    B = claim.on_state(final)
    piB = project_pi(B).values
    xi = B - types.rho[None, :] * piB[:, None]

    keys = _type_keys(laws)
    fmap = FeatureMap(spec, market.d, claim.regression_features, keys, degree=basis.degree)
    phi = phi_path(market, bundle)
    ref = solve_lsmc(
        GeneratorSpec(SINGLE_AGENT, types.alpha[None, :], u_max), xi, bundle, spec, phi, fmap, basis, tstate
    )
    theta_b = ref.Z + phi[:, None] / types.alpha[None, :, None, None]

    # auxiliary equation: one agent per world under its own tilted measure
    owner = np.arange(n_paths) % n_agents
    hstate = {k: getattr(types, k)[owner][:, None] for k in ("x0", "alpha", "rho")}
    u_bound = max(ref.diagnostics["max_abs_u"], 1e-12)
    zeta_hat = TiltedIntensity(spec.zeta, lambda cell, st: ref.predict(cell, st)["u"], "alpha", u_bound,
                               spec.c_nu * float(np.exp(np.max(types.alpha) * u_bound)))
    tilted = spec.with_zeta(zeta_hat, zeta_hat.c_nu) if spec.n_atoms else spec
    hb = simulate_under_phat(grid, market, tilted, n_paths, seed + 1, extra_state=hstate, workers=workers)
    aux_terminal = hstate["rho"] * moments.mean_x0
    aux = solve_lsmc(
        GeneratorSpec(AUXILIARY, hstate["alpha"], u_max), aux_terminal, hb, tilted,
        np.zeros_like(hb.dW), fmap, basis, hstate,
    )
    z_tilde = np.stack(
        [aux.predict(i, bundle_state(bundle, i, spec.loss_sizes, tstate))["z"] for i in range(n)], axis=2
    )

    rho = types.rho[None, :, None, None]
    pi_tb = project_pi(theta_b)
    pi_zt = project_pi(z_tilde)
    Z, theta_tilde = reconstruct(
        z_tilde, theta_b, rho, pi_zt.values[:, None], pi_tb.values[:, None], moments.mean_rho
    )
    pi_tt = project_pi(theta_tilde)
    pi_z_tb = project_pi(Z + theta_b)
    roundtrip = z_tilde - (Z - rho * pi_z_tb.values[:, None])
    scale = np.abs(rho) * np.broadcast_to(pi_z_tb.se[:, None], roundtrip.shape)
    d_w_hat = bundle.dW + phi * grid.dt
    diag = {
        "roundtrip_max": float(np.max(np.abs(roundtrip))),
        # undefined (nan) for a single agent per world
        "roundtrip_pi_se_max": float(np.nanmax(scale)) if np.isfinite(scale).any() else float("nan"),
        "reference_y0": ref.y0,
        "reference_y0_se": ref.diagnostics["y0_se"],
        "aux_y0": aux.y0,
        "aux_max_abs_z": float(np.max(np.abs(aux.Z))),
        "ridge_fallbacks": len(ref.diagnostics["ridge_fallbacks"]) + len(aux.diagnostics["ridge_fallbacks"]),
    }
    return McEquilibrium(
        pop, moments, ref, aux, hb, B, piB, theta_b, z_tilde, Z, theta_tilde, pi_tb, pi_tt, d_w_hat, diag
    )
