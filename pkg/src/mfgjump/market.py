"""Market coefficients, strategy parametrizations and wealth accumulation.

Gains are written in terms of ``theta = Sigma^T vartheta`` so that wealth
solves ``dX = theta (phi dt + dW) = theta dW_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import PathBundle
from .errors import ConfigurationError, SingularityError

THETA = "theta"
VARTHETA = "vartheta"


@dataclass(frozen=True)
class ConstantPhi:
    values: tuple

    name = "constant"
    deterministic = True

    def __call__(self, t, state=None):
        return np.asarray(self.values, dtype=float)

    @property
    def bound(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class PiecewisePhi:
    """``values[j]`` on ``[breaks[j-1], breaks[j])``."""

    breaks: tuple
    values: tuple

    name = "piecewise"
    deterministic = True

    def __post_init__(self):
        if len(self.values) != len(self.breaks) + 1:
            raise ConfigurationError("piecewise phi needs len(values) == len(breaks) + 1")

    def __call__(self, t, state=None):
        j = int(np.searchsorted(np.asarray(self.breaks, dtype=float), t, side="right"))
        return np.asarray(self.values[j], dtype=float)

    @property
    def bound(self) -> float:
        return float(max(np.linalg.norm(v) for v in self.values))


@dataclass(frozen=True)
class StateScaledPhi:
    """``base * (1 + scale * tanh(W^1_t))``; bounded by ``|base| (1 + |scale|)``."""

    base: tuple
    scale: float

    name = "state_scaled"
    deterministic = False

    def __call__(self, t, state=None):
        base = np.asarray(self.base, dtype=float)
        if state is None:
            return base
        w = np.asarray(state["w"])[..., 0]
        return base * (1.0 + self.scale * np.tanh(w))[..., None]

    @property
    def bound(self) -> float:
        return float(np.linalg.norm(self.base)) * (1.0 + abs(self.scale))


PHI_FORMS = {"constant": ConstantPhi, "piecewise": PiecewisePhi, "state_scaled": StateScaledPhi}


@dataclass(frozen=True)
class MarketSpec:
    d: int
    phi: object
    sigma: np.ndarray
    s0: np.ndarray
    phi_bound: float

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float).reshape(self.d, self.d)
        s0 = np.asarray(self.s0, dtype=float).reshape(self.d)
        sigma.setflags(write=False)
        s0.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "s0", s0)
        if self.d < 1:
            raise ConfigurationError("market needs d >= 1")
        if np.any(s0 <= 0):
            raise ConfigurationError("initial prices must be positive")
        if getattr(self.phi, "bound", 0.0) > self.phi_bound + 1e-12:
            raise ConfigurationError("market price of risk exceeds its declared bound")
        _check_invertible(sigma)

    @property
    def deterministic_phi(self) -> bool:
        return bool(getattr(self.phi, "deterministic", False))

    def phi_at(self, t, state=None) -> np.ndarray:
        v = np.asarray(self.phi(t, state), dtype=float)
        if np.any(np.linalg.norm(np.atleast_1d(v), axis=-1) > self.phi_bound + 1e-12):
            raise ConfigurationError("market price of risk exceeds its declared bound")
        return v


def constant_market(phi, sigma=None, s0=None) -> MarketSpec:
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    d = phi.size
    sigma = np.eye(d) if sigma is None else sigma
    s0 = np.ones(d) if s0 is None else s0
    return MarketSpec(d, ConstantPhi(tuple(phi)), sigma, s0, float(np.linalg.norm(phi)))


def _check_invertible(sigma: np.ndarray) -> None:
    cond = np.linalg.cond(sigma)
    if not np.all(np.isfinite(cond)) or np.any(cond > 1e12):
        raise SingularityError("volatility matrix is singular")


@dataclass(frozen=True)
class StrategyPath:
    """Per-cell strategy values, shape (..., n, d); cell ``i`` uses data up to ``t_i``."""

    values: np.ndarray
    tag: str = THETA

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.tag not in (THETA, VARTHETA):
            raise ConfigurationError(f"unknown parametrization {self.tag!r}")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("strategy values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def reparametrize(s: StrategyPath, sigma) -> StrategyPath:
    """Switch between ``vartheta`` and ``theta = Sigma^T vartheta``.

    ``sigma`` has shape (d, d) or one matrix per cell, broadcast against the
    leading axes of the strategy.
    """
    sigma = np.asarray(sigma, dtype=float)
    _check_invertible(sigma)
    sT = np.swapaxes(sigma, -1, -2)
    v = s.values
    if s.tag == VARTHETA:
        return StrategyPath(np.einsum("...ij,...j->...i", sT, v), THETA)
    return StrategyPath(np.linalg.solve(np.broadcast_to(sT, v.shape + v.shape[-1:]), v[..., None])[..., 0], VARTHETA)


def phi_path(market: MarketSpec, bundle: PathBundle) -> np.ndarray:
    """phi evaluated at the left endpoint of every cell, shape (P, n, d)."""
    P, n, d = bundle.dW.shape
    t = bundle.grid.nodes[:-1]
    if market.deterministic_phi:
        vals = np.stack([np.broadcast_to(market.phi_at(ti), (d,)) for ti in t])
        return np.broadcast_to(vals, (P, n, d))
    W = bundle.w_levels()
    return np.stack([np.broadcast_to(market.phi_at(t[i], {"w": W[:, i]}), (P, d)) for i in range(n)], axis=1)


def w_hat_increments(bundle: PathBundle, market: MarketSpec) -> np.ndarray:
    """``dW_hat_i = dW_i + phi_i dt``, shape (P, n, d)."""
    return bundle.dW + phi_path(market, bundle) * bundle.grid.dt


def wealth_path(x0, theta: StrategyPath | np.ndarray, market: MarketSpec, bundle: PathBundle) -> np.ndarray:
    """Wealth at every node, shape (P, n+1) or (P, M, n+1) for per-agent strategies.

    ``theta`` is broadcast against (P, n, d); an extra agent axis after the path
    axis is allowed, i.e. (P, M, n, d).
    """
    th = theta.values if isinstance(theta, StrategyPath) else np.asarray(theta, dtype=float)
    if isinstance(theta, StrategyPath) and theta.tag != THETA:
        raise ConfigurationError("wealth accumulation expects the theta parametrization")
    dWh = w_hat_increments(bundle, market)
    if th.ndim == 4:
        gains = np.einsum("pmnd,pnd->pmn", th, dWh)
    else:
        gains = np.sum(np.broadcast_to(th, dWh.shape) * dWh, axis=-1)
    x0 = np.asarray(x0, dtype=float)
    x0 = x0[..., None] if x0.ndim else x0
    out = np.zeros(gains.shape[:-1] + (gains.shape[-1] + 1,))
    np.cumsum(gains, axis=-1, out=out[..., 1:])
    return out + x0


def price_path(market: MarketSpec, bundle: PathBundle) -> np.ndarray:
    """Asset prices at the nodes via log-Euler on ``dS/S = sigma dW_hat``, shape (P, n+1, d)."""
    dWh = w_hat_increments(bundle, market)
    sig = market.sigma
    log_inc = np.einsum("ij,pnj->pni", sig, dWh) - 0.5 * np.sum(sig**2, axis=1) * bundle.grid.dt
    out = np.zeros((bundle.n_paths, bundle.grid.n_steps + 1, market.d))
    np.cumsum(log_inc, axis=1, out=out[:, 1:])
    return market.s0 * np.exp(out)
