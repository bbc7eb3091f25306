"""Backward solvers for the exponential-utility JBSDEs.

Two generators are supported.  The single-agent generator

    f(z, u) = z . phi + |phi|^2 / (2 alpha) - sum_k g_alpha(u_k) zeta_k lambda_k,
    g_alpha(u) = (exp(alpha u) - 1 - alpha u) / alpha,

and the auxiliary generator ``-sum_k g_alpha(u_k) zeta_hat_k lambda_k`` used
under the tilted measure.  With ``dY = f dt + Z dW + U d(mu - nu)`` the
discrete recursion is ``Y_i = E_i[Y_{i+1}] - f(Z_i, U_i) dt``.
"""

from __future__ import annotations

import itertools

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .basis import JumpSpec, PathBundle, bundle_state
from .errors import ConfigurationError, SolverError
from .lattice import LatticeModel, shift

log = logging.getLogger(__name__)

SINGLE_AGENT = "single_agent"
AUXILIARY = "auxiliary"


def g_alpha(u, alpha, u_max=None):
    """``(exp(alpha u) - 1 - alpha u) / alpha`` with ``u`` clamped to ``[-u_max, u_max]``."""
    alpha = np.asarray(alpha, dtype=float)
    u = np.asarray(u, dtype=float)
    if u_max is not None:
        u = np.clip(u, -u_max, u_max)
    au = alpha * u
    with np.errstate(over="ignore"):  # overflow surfaces as a non-finite value in the solver
        return (np.expm1(au) - au) / alpha


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    alpha: float
    u_max: float | None = None

    def __post_init__(self):
        if self.kind not in (SINGLE_AGENT, AUXILIARY):
            raise ConfigurationError(f"unknown generator kind {self.kind!r}")
        if np.any(np.asarray(self.alpha) <= 0):
            raise ConfigurationError("risk aversion must be positive")
        if self.u_max is None:
            object.__setattr__(self, "u_max", float(50.0 / np.min(self.alpha)))

    def drift(self, z, u, rates, phi=None):
        """Generator value; ``z``, ``phi`` have trailing axis d and ``u``, ``rates`` trailing axis K."""
        jump = np.sum(g_alpha(u, np.asarray(self.alpha)[..., None], self.u_max) * rates, axis=-1) if np.size(u) else 0.0
        if self.kind == AUXILIARY:
            return -jump
        phi = np.asarray(phi, dtype=float)
        return np.sum(z * phi, axis=-1) + np.sum(phi**2, axis=-1) / (2 * np.asarray(self.alpha)) - jump

    def zero_point(self, phi=None):
        d = np.shape(phi)[-1] if phi is not None else 1
        return self.drift(np.zeros(d), np.zeros(0), np.zeros(0), phi)


@dataclass(frozen=True)
class PathValues:
    """Solution read along sampled paths.

    ``Y`` (P, n+1), ``Z`` (P, n, d), ``U`` (P, n, K), ``probs`` (P, n, K) the
    per-cell compensator mass ``zeta lambda dt`` used by the solver, and
    ``jumps`` (P, n, K) the event counts on each path.
    """

    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    probs: np.ndarray
    jumps: np.ndarray


@dataclass(frozen=True)
class BsdeSolution:
    """Common interface of both backends; ``diagnostics`` is a plain dict."""

    kind: str
    backend: str
    y0: float
    diagnostics: dict


# --------------------------------------------------------------------------
# lattice backend
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeSolution(BsdeSolution):
    """Dense lattice arrays.

    ``Y`` (n+1, *S); ``Ymid`` (n, *S) after the common substep; ``Z`` (n, *S);
    ``U`` (n, K, *S) where common atoms are indexed by the node state at the
    start of the cell and idiosyncratic atoms by the mid state; ``probs``
    shares the layout of ``U``; ``steps`` (n, *S) the Brownian move size.
    """

    model: LatticeModel = None
    alpha: float = 1.0
    Y: np.ndarray = None
    Ymid: np.ndarray = None
    Z: np.ndarray = None
    U: np.ndarray = None
    probs: np.ndarray = None
    steps: np.ndarray = None

    def theta_star(self) -> np.ndarray:
        """Optimal strategy ``Z + phi / alpha`` per cell and node state."""
        phi = self.model.phi.reshape((-1,) + (1,) * (self.Z.ndim - 1))
        return self.Z + phi / self.alpha

    def along(self, bundle: PathBundle, agent: int = 0) -> PathValues:
        m = self.model
        node, mid, term = m.path_indices(bundle, agent)
        P, n, K = bundle.n_paths, m.n_steps, m.n_atoms
        cells = np.broadcast_to(np.arange(n), (P, n))
        Y = np.empty((P, n + 1))
        Y[:, :-1] = self.Y[(cells,) + node]
        Y[:, -1] = self.Y[(np.full(P, n),) + term]
        Z = self.Z[(cells,) + node][..., None]
        U = np.zeros((P, n, K))
        pr = np.zeros((P, n, K))
        for k in range(K):
            idx = node if m.common[k] else mid
            U[..., k] = self.U[(cells, np.full_like(cells, k)) + idx]
            pr[..., k] = self.probs[(cells, np.full_like(cells, k)) + idx]
        jumps = bundle.common_counts + bundle.idio_counts[:, agent]
        return PathValues(Y, Z, U, pr, jumps)


def tilted_probabilities(reference: LatticeSolution) -> np.ndarray:
    """Per-cell tilted event probabilities ``exp(alpha U^B) p`` in the layout of ``U``."""
    return reference.probs * np.exp(reference.alpha * reference.U)


def solve_lattice(
    gen: GeneratorSpec,
    terminal,
    model: LatticeModel,
    probs: np.ndarray | None = None,
) -> LatticeSolution:
    """Backward recursion on the lattice.

    ``terminal`` is an array over node states or a callable receiving the
    dense feature dict of the model.  ``probs`` overrides the per-cell event
    probabilities (layout of ``LatticeSolution.U``), which is how the tilted
    dynamics of the auxiliary equation are supplied.  The generator is free
    of ``y`` and ``(Z, U)`` are read off the next layer, so each cell is
    solved in one pass.
    """
    n, K, S = model.n_steps, model.n_atoms, model.shape
    dt = model.grid.dt
    alpha = float(gen.alpha)
    xi = terminal(model.features()) if callable(terminal) else terminal
    xi = np.broadcast_to(np.asarray(xi, dtype=float), S)
    if not np.all(np.isfinite(xi)):
        raise SolverError("terminal condition is not finite on every lattice state")
    if probs is None:
        probs = np.broadcast_to(model.probs.reshape((1, K) + (1,) * len(S)), (n, K) + S)
    probs = np.asarray(probs, dtype=float)
    cidx = np.flatnonzero(model.common)
    iidx = np.flatnonzero(~model.common)
    reach = model.reachable()

    Y = np.empty((n + 1,) + S)
    Ymid = np.empty((n,) + S)
    Z = np.empty((n,) + S)
    U = np.zeros((n, K) + S)
    steps = np.empty((n,) + S)
    Y[n] = xi
    for i in range(n - 1, -1, -1):
        nxt = Y[i + 1]
        # idiosyncratic substep: at most one idiosyncratic atom fires
        ymid = nxt.copy()
        for k in iidx:
            u = shift(nxt, model.count_axis(k), 1) - nxt
            U[i, k] = u
            ymid += probs[i, k] * (u + g_alpha(u, alpha, gen.u_max))
        Ymid[i] = ymid
        # common substep: up, down or exactly one common atom
        pc = probs[i, cidx].sum(axis=0) if len(cidx) else np.zeros(S)
        if np.any(pc[reach[i]] >= 1.0):
            raise SolverError("tilted common jump probability reaches one", cell=i)
        s = np.sqrt(dt / (1.0 - pc))
        yu, yd = shift(ymid, 0, 1), shift(ymid, 0, -1)
        base = 0.5 * (yu + yd)
        z = (yu - yd) / (2.0 * s)
        expect = base.copy()
        jump = np.zeros(S)
        for k in cidx:
            u = shift(ymid, model.count_axis(k), 1) - base
            U[i, k] = u
            expect += probs[i, k] * u
            jump += probs[i, k] * g_alpha(u, alpha, gen.u_max)
        if gen.kind == SINGLE_AGENT:
            phi = model.phi[i]
            drift_dt = (z * phi + phi**2 / (2 * alpha)) * dt - jump
        else:
            drift_dt = -jump
        Y[i] = expect - drift_dt
        Z[i] = z
        steps[i] = s
        bad = ~np.isfinite(Y[i][reach[i]])
        if np.any(bad):
            raise SolverError("non-finite value in lattice recursion", cell=i)

    # conditional tail energy e_i = Z_i^2 dt + E_i[e_{i+1}]
    energy = np.zeros(S)
    sup_energy = 0.0
    for i in range(n - 1, -1, -1):
        e = energy
        emid = e.copy()
        for k in iidx:
            emid += probs[i, k] * (shift(e, model.count_axis(k), 1) - e)
        pc = probs[i, cidx].sum(axis=0) if len(cidx) else 0.0
        base = 0.5 * (shift(emid, 0, 1) + shift(emid, 0, -1))
        ex = (1 - pc) * base
        for k in cidx:
            ex = ex + probs[i, k] * shift(emid, model.count_axis(k), 1)
        energy = Z[i] ** 2 * dt + ex
        sup_energy = max(sup_energy, float(np.max(energy[reach[i]])))

    u_reach = [U[i][:, reach[i]] for i in range(n)]
    max_u = float(max((np.max(np.abs(u)) for u in u_reach if u.size), default=0.0))
    osc = float(np.ptp(xi[reach[n]]))
    diag = {
        "terminal_mismatch": float(np.max(np.abs(Y[n] - xi))),
        "bmo_energy": sup_energy,
        "max_abs_u": max_u,
        "terminal_oscillation": osc,
        "n_states": int(reach[n].sum()),
    }
    return LatticeSolution(
        gen.kind, "lattice", float(Y[0][model.origin()]), diag,
        model, alpha, Y, Ymid, Z, U, np.broadcast_to(probs, (n, K) + S), steps,
    )


# --------------------------------------------------------------------------
# least-squares Monte Carlo backend
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    degree: int = 2
    ridge: float = 1e-8
    collinear_tol: float = 1e-9


class FeatureMap:
    """Polynomial regression basis on left-endpoint state features.

    Raw features: Brownian coordinates, running counts per atom, optional
    claim-state features and varying agent types (``alpha``, ``rho``).
    """

    def __init__(
        self,
        spec: JumpSpec,
        d: int,
        claim_features: Callable[[Mapping], list] | None = None,
        type_keys: tuple = (),
        extra_keys: tuple = (),
        degree: int = 2,
    ):
        self.spec = spec
        self.d = d
        self.claim_features = claim_features
        self.type_keys = tuple(type_keys)
        self.extra_keys = tuple(extra_keys)
        self.degree = degree

    def raw(self, state: Mapping) -> np.ndarray:
        cc = np.asarray(state["common_counts"])
        ic = np.asarray(state["idio_counts"])
        P, M = ic.shape[0], ic.shape[1]
        shape = (P, M)
        cols = [np.broadcast_to(state["w"][..., k], shape) for k in range(self.d)]
        for k in range(self.spec.n_atoms):
            src = cc if self.spec.common[k] else ic
            cols.append(np.broadcast_to(src[..., k], shape))
        if self.claim_features is not None:
            cols.extend(np.broadcast_to(c, shape) for c in self.claim_features(state))
        for key in self.type_keys + self.extra_keys:
            cols.append(np.broadcast_to(state[key], shape))
        return np.stack([np.asarray(c, dtype=float).reshape(-1) for c in cols], axis=1)

    def design(self, state: Mapping) -> np.ndarray:
        r = self.raw(state)
        cols = [np.ones(r.shape[0])]
        for deg in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(r.shape[1]), deg):
                cols.append(np.prod(r[:, combo], axis=1))
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class _CellFit:
    keep: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    beta_y: np.ndarray
    beta_z: np.ndarray  # (q, d)
    beta_u: np.ndarray  # (q, K)

    def transform(self, X):
        Xs = (X[:, self.keep] - self.mean) / self.scale
        Xs[:, 0] = 1.0
        return Xs


def _select_columns(X: np.ndarray, tol: float):
    """Drop constant and exactly collinear columns (pivoted Gram-Schmidt on the Gram matrix)."""
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    cand = [0] + [c for c in range(1, X.shape[1]) if sd[c] > 1e-12 * max(1.0, abs(mean[c]))]
    Xs = (X[:, cand] - mean[cand]) / np.where(sd[cand] > 0, sd[cand], 1.0)
    Xs[:, 0] = 1.0
    G = Xs.T @ Xs / X.shape[0]
    keep = []
    basis = []  # orthonormal coordinates in the Gram inner product
    for c in range(len(cand)):
        v = np.zeros(len(cand))
        v[c] = 1.0
        for b in basis:
            v = v - (b @ G @ v) * b
        nrm = v @ G @ v
        if nrm > tol:
            basis.append(v / np.sqrt(nrm))
            keep.append(cand[c])
    keep = np.array(keep)
    scale = np.where(sd[keep] > 0, sd[keep], 1.0)
    return keep, mean[keep], scale


def _lstsq(Xs, targets, ridge, diag, cell):
    G = Xs.T @ Xs
    rhs = Xs.T @ targets
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > 1e12:
        log.warning("rank-deficient regression in cell %d (cond %.3g); using ridge fallback", cell, cond)
        diag["ridge_fallbacks"].append(cell)
        G = G + ridge * np.trace(G) / G.shape[0] * np.eye(G.shape[0])
    return np.linalg.solve(G, rhs)


@dataclass(frozen=True)
class LsmcSolution(BsdeSolution):
    """Per-sample arrays with shape (P, M, ...) plus the per-cell regressions."""

    Y: np.ndarray = None  # (P, M, n+1)
    Z: np.ndarray = None  # (P, M, n, d)
    U: np.ndarray = None  # (P, M, n, K)
    probs: np.ndarray = None  # (P, M, n, K)
    fits: tuple = ()
    fmap: FeatureMap = None
    y0_paths: np.ndarray = None
    spec: JumpSpec = None  # compensator the solution was computed under
    dt: float = 0.0
    bernoulli: bool = False  # lattice paths: at most one event per substep

    def predict(self, cell: int, state: Mapping) -> dict:
        """Evaluate the cell regressions on a state dict; arrays shaped (P, M, ...)."""
        X = self.fmap.design(state)
        ic = state["idio_counts"]
        shape = ic.shape[:2]
        fit = self.fits[cell]
        Xs = fit.transform(X)
        K = fit.beta_u.shape[1]
        u = Xs @ fit.beta_u
        if self.bernoulli and K:
            r = self.spec.rates(cell * self.dt, state, shape + (K,)).reshape(-1, K) * self.dt
            u = _bernoulli_u(u, r, self.spec.common)
        return {
            "y": (Xs @ fit.beta_y).reshape(shape),
            "z": (Xs @ fit.beta_z).reshape(shape + (fit.beta_z.shape[1],)),
            "u": u.reshape(shape + (K,)),
        }

    def along(self, agent: int = 0) -> PathValues:
        return PathValues(self.Y[:, agent], self.Z[:, agent], self.U[:, agent], self.probs[:, agent], None)


def solve_lsmc(
    gen: GeneratorSpec,
    terminal: np.ndarray,
    bundle: PathBundle,
    spec: JumpSpec,
    phi: np.ndarray,
    fmap: FeatureMap,
    basis: BasisSpec = BasisSpec(),
    extra_state: Mapping | None = None,
) -> LsmcSolution:
    """Backward least-squares regression over a (P, M) sample.

    ``terminal`` has shape (P, M); ``phi`` is (P, n, d) on the bundle's
    Brownian increments; ``spec`` supplies the (possibly tilted) compensator.
    Z and U are regressed on martingale increments of the residual
    ``Y_{i+1} - E_i[Y_{i+1}]``, so a deterministic terminal gives Z = U = 0.
    """
    P, M, n, K = bundle.n_paths, bundle.n_agents, bundle.grid.n_steps, spec.n_atoms
    d, dt = bundle.d, bundle.grid.dt
    terminal = np.broadcast_to(np.asarray(terminal, dtype=float), (P, M))
    if not np.all(np.isfinite(terminal)):
        raise SolverError("terminal condition is not finite on every path")
    N = P * M
    bernoulli = bundle.source == "lattice"
    alpha = np.broadcast_to(np.asarray(gen.alpha, dtype=float), (P, M)).reshape(N)
    gen_flat = GeneratorSpec(gen.kind, alpha, gen.u_max)
    Y = np.empty((P, M, n + 1))
    Z = np.zeros((P, M, n, d))
    U = np.zeros((P, M, n, K))
    probs = np.zeros((P, M, n, K))
    Y[..., n] = terminal
    diag = {"ridge_fallbacks": []}
    fits = [None] * n
    y0_paths = terminal.reshape(N).copy()
    loss = spec.loss_sizes
    for i in range(n - 1, -1, -1):
        state = bundle_state(bundle, i, loss, extra_state)
        X = fmap.design(state)
        keep, mean, scale = _select_columns(X, basis.collinear_tol)
        Xs = (X[:, keep] - mean) / scale
        Xs[:, 0] = 1.0
        yn = Y[..., i + 1].reshape(N)
        beta_y = _lstsq(Xs, yn, basis.ridge, diag, i)
        yhat = Xs @ beta_y
        res = yn - yhat
        dW = np.broadcast_to(bundle.dW[:, None, i, :], (P, M, d)).reshape(N, d)
        beta_z = _lstsq(Xs, res[:, None] * dW / dt, basis.ridge, diag, i)
        z = Xs @ beta_z
        if K:
            r = spec.rates(i * dt, state, (P, M, K)).reshape(N, K) * dt
            dN = (bundle.common_counts[:, None, i, :] + bundle.idio_counts[:, :, i, :]).reshape(N, K)
            tgt = np.where(r > 0, res[:, None] * (dN - r) / np.where(r > 0, r, 1.0), 0.0)
            beta_u = _lstsq(Xs, tgt, basis.ridge, diag, i)
            u = Xs @ beta_u
            if bernoulli:
                u = _bernoulli_u(u, r, spec.common)
            u = np.where(r > 0, u, 0.0)
        else:
            r = np.zeros((N, 0))
            dN = np.zeros((N, 0))
            beta_u = np.zeros((Xs.shape[1], 0))
            u = np.zeros((N, 0))
        ph = np.broadcast_to(phi[:, None, i, :], (P, M, d)).reshape(N, d)
        f = gen_flat.drift(z, u, r / dt, ph) if K else gen_flat.drift(z, np.zeros((N, 0)), np.zeros((N, 0)), ph)
        Y[..., i] = (yhat - f * dt).reshape(P, M)
        Z[:, :, i] = z.reshape(P, M, d)
        U[:, :, i] = u.reshape(P, M, K)
        probs[:, :, i] = r.reshape(P, M, K)
        y0_paths -= np.sum(z * dW, axis=1) + np.sum(u * (dN - r), axis=1) + f * dt
        fits[i] = _CellFit(keep, mean, scale, beta_y, beta_z, beta_u)
        if not np.all(np.isfinite(Y[..., i])):
            raise SolverError("non-finite value in regression recursion", cell=i)

    tail = np.cumsum((np.sum(Z**2, axis=-1) * dt)[..., ::-1], axis=-1)[..., ::-1]
    per_path = y0_paths.reshape(P, M).mean(axis=1)
    diag.update(
        terminal_mismatch=float(np.max(np.abs(Y[..., n] - terminal))),
        bmo_energy=float(np.max(tail.mean(axis=(0, 1)))) if n else 0.0,
        max_abs_u=float(np.max(np.abs(U))) if U.size else 0.0,
        terminal_oscillation=float(np.ptp(terminal)),
        y0_se=float(per_path.std(ddof=1) / np.sqrt(P)) if P > 1 else float("nan"),
    )
    return LsmcSolution(
        gen.kind, "lsmc", float(Y[..., 0].mean()), diag,
        Y, Z, U, probs, tuple(fits), fmap, y0_paths.reshape(P, M), spec, dt, bernoulli,
    )


def _bernoulli_u(v, r, common):
    """Jump coefficients when the atoms of a substep are mutually exclusive events.

    ``v`` is the Poisson-normalized regression ``E[res (dN_k - r_k)] / r_k``.
    Within a group of exclusive outcomes the event covariance is
    ``diag(r) - r r^T``; inverting it (Sherman-Morrison) adds
    ``sum_j r_j v_j / (1 - sum_j r_j)`` to every atom of the group.
    """
    u = np.array(v, dtype=float, copy=True)
    for mask in (np.asarray(common, dtype=bool), ~np.asarray(common, dtype=bool)):
        if not mask.any():
            continue
        rg = r[:, mask]
        shift = np.sum(rg * v[:, mask], axis=1) / (1.0 - np.sum(rg, axis=1))
        u[:, mask] += shift[:, None]
    return u
