"""Density of the tilted measure and expectations under it.

The density is the stochastic exponential of
``M = -int phi dW + int int (exp(alpha U^B) - 1) d(mu - nu)``.  On a grid
with left-endpoint coefficients its logarithm accumulates per cell

    -phi dW - |phi|^2 dt / 2 + sum_k alpha U_k dN_k - sum_k (exp(alpha U_k) - 1) zeta_k lambda_k dt.

Under the tilted measure ``W_hat = W + int phi dt`` is a Brownian motion and
the jump compensator becomes ``exp(alpha U^B) zeta lambda``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .basis import (
    STREAM_BROWNIAN,
    BLOCK,
    JumpSpec,
    PathBundle,
    TimeGrid,
    _blockwise,
    simulate_jump_measure,
    stream,
)
from .errors import ModelViolationError
from .market import MarketSpec
from .stats import Estimate, estimate


@dataclass(frozen=True)
class DensityPath:
    """Density values at the nodes, shape (P, n+1), with its log components."""

    values: np.ndarray
    log_continuous: np.ndarray  # (P,)
    log_jumps: np.ndarray  # (P,)
    log_compensator: np.ndarray  # (P,)

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    def report(self) -> dict:
        t = self.terminal
        e = estimate(t)
        return {"mean": e.mean, "se": e.se, "min": float(t.min()), "max": float(t.max()), "positive": bool(np.all(self.values > 0))}


def doleans_exponential(phi, U, dW, jumps, probs, alpha, dt: float) -> DensityPath:
    """Discrete stochastic exponential along paths.

    ``phi`` and ``dW`` are (P, n, d); ``U``, ``jumps`` (event counts) and
    ``probs`` (compensator mass ``zeta lambda dt`` per cell) are (P, n, K);
    ``alpha`` is a scalar or (P,).
    """
    phi = np.asarray(phi, dtype=float)
    dW = np.asarray(dW, dtype=float)
    P, n = dW.shape[:2]
    a = np.asarray(alpha, dtype=float).reshape(-1, 1, 1) if np.ndim(alpha) else float(alpha)
    cont = -np.sum(phi * dW, axis=-1) - 0.5 * np.sum(phi**2, axis=-1) * dt
    cont = np.broadcast_to(cont, (P, n))
    if U is None or np.size(U) == 0:
        jump = np.zeros((P, n))
        comp = np.zeros((P, n))
    else:
        aU = a * np.asarray(U, dtype=float)
        jump = np.sum(aU * jumps, axis=-1)
        comp = np.sum(np.expm1(aU) * probs, axis=-1)
    logs = np.zeros((P, n + 1))
    np.cumsum(cont + jump - comp, axis=1, out=logs[:, 1:])
    values = np.exp(logs)
    if not np.all(values > 0):
        raise ModelViolationError("density lost positivity (overflow in the exponent)")
    return DensityPath(values, cont.sum(axis=1), jump.sum(axis=1), comp.sum(axis=1))


@dataclass(frozen=True)
class TiltedIntensity:
    """``zeta_hat = exp(alpha U^B) zeta`` with ``U^B`` supplied per cell.

    ``u_of`` maps ``(cell, state)`` to U values broadcastable to (P, M, K);
    ``alpha`` is a scalar or the key of a per-agent state entry.
    """

    base: object
    u_of: Callable
    alpha: object
    u_bound: float
    c_nu: float

    name = "tilted"
    state_free = False

    def __call__(self, t, state=None):
        z = np.asarray(self.base(t, state), dtype=float)
        if state is None:
            return z
        a = state[self.alpha] if isinstance(self.alpha, str) else self.alpha
        a = np.asarray(a, dtype=float)
        u = np.clip(np.asarray(self.u_of(state["cell"], state), dtype=float), -self.u_bound, self.u_bound)
        return z * np.exp(a[..., None] * u if a.ndim else a * u)

    @property
    def bound(self) -> float:
        return self.c_nu

    @property
    def lower(self) -> float:
        return 0.0


def tilt_compensator(spec: JumpSpec, alpha, U, u_bound: float | None = None) -> JumpSpec:
    """Tilted jump spec with ``zeta_hat = exp(alpha U) zeta``.

    ``U`` is either an array (n, K) of per-cell values or a callable
    ``(cell, state) -> U``; in the latter case ``u_bound`` bounds ``|U|``.
    The recorded bound is ``c_nu exp(alpha_max u_bound)``.
    """
    if callable(U):
        u_of = U
        if u_bound is None:
            raise ValueError("a bound on |U| is needed for state-dependent tilts")
    else:
        arr = np.asarray(U, dtype=float)
        u_of = lambda cell, state: arr[cell]  # noqa: E731
        u_bound = float(np.max(np.abs(arr))) if arr.size else 0.0
    a_max = float(np.max(alpha)) if not isinstance(alpha, str) else None
    if a_max is None:
        raise ValueError("pass numeric alpha or use TiltedIntensity directly")
    c_hat = spec.c_nu * float(np.exp(a_max * u_bound))
    zeta = TiltedIntensity(spec.zeta, u_of, alpha, u_bound, c_hat)
    return spec.with_zeta(zeta, c_hat)


def phat_expectation(payoff, density) -> Estimate:
    """Estimate of the tilted-measure expectation by reweighting."""
    d = density.terminal if isinstance(density, DensityPath) else np.asarray(density)
    return estimate(np.asarray(payoff, dtype=float) * d)


def simulate_under_phat(
    grid: TimeGrid,
    market: MarketSpec,
    tilted: JumpSpec,
    n_paths: int,
    seed: int,
    extra_state: Mapping | None = None,
    path_offset: int = 0,
    workers: int = 1,
) -> PathBundle:
    """Paths of one agent per world under the tilted measure.

    The Brownian increments are ``dW = dW_hat - phi dt`` with ``dW_hat``
    standard; jumps follow the tilted compensator with one agent per path
    (the tilt is agent specific).
    """
    n, d, dt = grid.n_steps, market.d, grid.dt

    def draw(block):
        return stream(seed, STREAM_BROWNIAN, block).standard_normal((BLOCK, n, d)) * np.sqrt(dt)

    dWh = _blockwise(draw, path_offset, path_offset + n_paths, workers)
    dW = np.empty_like(dWh)
    w = np.zeros((n_paths, d))
    for i in range(n):
        ph = np.broadcast_to(market.phi_at(i * dt, None if market.deterministic_phi else {"w": w}), (n_paths, d))
        dW[:, i] = dWh[:, i] - ph * dt
        w = w + dW[:, i]
    js = simulate_jump_measure(
        grid, tilted, 1, n_paths, seed, brownian=dW, extra_state=extra_state, path_offset=path_offset, workers=workers
    )
    return PathBundle(grid, dW, js.common_counts, js.idio_counts, js.events, seed, path_offset, source="tilted")
