"""Agent types, populations and the common-noise projection.

The projection of a per-agent process onto common-noise information is
estimated by averaging over the idiosyncratic copies that share a common
path.  Agent characteristics ``(x0, alpha, rho)`` are drawn once per
experiment, independently of the common noise, and then kept fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import STREAM_TYPES, PathBundle, stream
from .errors import ConfigurationError
from .stats import Estimate, estimate


# --------------------------------------------------------------------------
# type laws
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantLaw:
    value: float

    def sample(self, rng, size):
        return np.full(size, float(self.value))

    def atoms(self):
        return np.array([float(self.value)]), np.array([1.0])

    @property
    def lower(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class TwoPointLaw:
    values: tuple
    probs: tuple = (0.5, 0.5)

    def __post_init__(self):
        if len(self.values) != 2 or len(self.probs) != 2:
            raise ConfigurationError("two-point law needs two values and two probabilities")
        if min(self.probs) < 0 or not math.isclose(sum(self.probs), 1.0, abs_tol=1e-12):
            raise ConfigurationError("two-point probabilities must be nonnegative and sum to one")

    def sample(self, rng, size):
        pick = rng.random(size) < self.probs[1]
        return np.where(pick, float(self.values[1]), float(self.values[0]))

    def atoms(self):
        return np.asarray(self.values, dtype=float), np.asarray(self.probs, dtype=float)

    @property
    def lower(self) -> float:
        return float(min(v for v, p in zip(self.values, self.probs) if p > 0))


@dataclass(frozen=True)
class NormalLaw:
    mean: float
    sd: float

    def sample(self, rng, size):
        return self.mean + self.sd * rng.standard_normal(size)

    def atoms(self):
        return None

    @property
    def exact_mean(self) -> float:
        return float(self.mean)

    @property
    def lower(self) -> float:
        return -math.inf if self.sd > 0 else float(self.mean)


@dataclass(frozen=True)
class LognormalLaw:
    """``floor + exp(N(mu, sigma^2))``; a positive floor keeps risk aversion away from zero."""

    mu: float
    sigma: float
    floor: float = 0.0

    def sample(self, rng, size):
        return self.floor + np.exp(self.mu + self.sigma * rng.standard_normal(size))

    def atoms(self):
        return None

    @property
    def exact_mean(self) -> float:
        return float(self.floor + math.exp(self.mu + 0.5 * self.sigma**2))

    @property
    def lower(self) -> float:
        return float(self.floor)


LAWS = {"constant": ConstantLaw, "two_point": TwoPointLaw, "normal": NormalLaw, "lognormal": LognormalLaw}


def law_mean(law, fn=None, samples: np.ndarray | None = None) -> float:
    """``E[fn(X)]`` (identity by default).

    Exact for atomic laws and for plain means with a closed form; otherwise
    the mean over ``samples``.
    """
    at = law.atoms()
    if at is not None:
        v, w = at
        return float(np.sum(w * (v if fn is None else fn(v))))
    if fn is None and hasattr(law, "exact_mean"):
        return law.exact_mean
    if samples is None:
        raise ConfigurationError("moment of a continuous law needs samples")
    return float(np.mean(samples if fn is None else fn(samples)))


@dataclass(frozen=True)
class TypeLaws:
    x0: object
    alpha: object
    rho: object

    def __post_init__(self):
        errs = validate_type_laws(self)
        if errs:
            raise ConfigurationError("; ".join(errs))

    def varying(self) -> tuple:
        """Names of characteristics that are not constant."""
        return tuple(k for k in ("x0", "alpha", "rho") if not isinstance(getattr(self, k), ConstantLaw))


def validate_type_laws(laws) -> list[str]:
    errs = []
    if not laws.alpha.lower > 0:
        errs.append("risk aversion law must be bounded away from 0 (alpha >= floor > 0)")
    if isinstance(laws.rho, (NormalLaw, LognormalLaw)):
        errs.append("rho law must be constant or two-point")
    else:
        if math.isclose(law_mean(laws.rho), 1.0, abs_tol=1e-12):
            errs.append("equilibrium requires E[rho] != 1 (got E[rho] = 1)")
    return errs


@dataclass(frozen=True)
class AgentSample:
    x0: np.ndarray
    alpha: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for name in ("x0", "alpha", "rho"):
            a = np.asarray(getattr(self, name), dtype=float).copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def size(self) -> int:
        return self.alpha.shape[0]

    def state(self) -> dict:
        """Per-agent entries for state dicts, shaped (1, M)."""
        return {"x0": self.x0[None, :], "alpha": self.alpha[None, :], "rho": self.rho[None, :]}


def sample_types(laws: TypeLaws, M: int, seed: int) -> AgentSample:
    if M < 1:
        raise ConfigurationError("population needs at least one agent (M >= 1)")
    out = {}
    for slot, key in enumerate(("x0", "alpha", "rho")):
        out[key] = getattr(laws, key).sample(stream(seed, STREAM_TYPES, slot), M)
    return AgentSample(**out)


@dataclass(frozen=True)
class Moments:
    """Population moments entering the equilibrium algebra."""

    mean_x0: float
    mean_rho: float
    mean_inv_alpha: float


def type_moments(laws: TypeLaws, types: AgentSample | None = None) -> Moments:
    return Moments(
        law_mean(laws.x0, samples=None if types is None else types.x0),
        law_mean(laws.rho),
        law_mean(laws.alpha, lambda a: 1.0 / a, None if types is None else types.alpha),
    )


@dataclass(frozen=True)
class PopulationBundle:
    """Common noise stored once per path, M idiosyncratic copies with frozen types."""

    bundle: PathBundle
    types: AgentSample

    def __post_init__(self):
        if self.bundle.n_agents != self.types.size:
            raise ConfigurationError("population size differs from the number of sampled types")

    @property
    def n_agents(self) -> int:
        return self.types.size


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Projection:
    """Cross-agent mean per common path and its standard error."""

    values: np.ndarray
    se: np.ndarray

    def broadcast(self, M: int) -> np.ndarray:
        return np.repeat(self.values[:, None], M, axis=1)


def project_pi(values, pop: PopulationBundle | None = None) -> Projection:
    """Average over the agent axis (axis 1) of a (P, M, ...) array."""
    v = np.asarray(values, dtype=float)
    if v.ndim < 2 or v.shape[1] == 0:
        raise ConfigurationError("projection needs at least one agent copy (M >= 1)")
    if pop is not None and v.shape[1] != pop.n_agents:
        raise ConfigurationError("values do not match the population size")
    M = v.shape[1]
    # centring on the first copy makes identical copies project exactly
    dev = v - v[:, :1]
    mean = v[:, 0] + dev.mean(axis=1)
    se = dev.std(axis=1, ddof=1) / np.sqrt(M) if M > 1 else np.full_like(mean, np.nan)
    return Projection(mean, se)


def project_wealth_integral(theta, d_w_hat) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of ``E[int theta dW_hat | F^0] = int Pi(theta) dW_hat`` per common path.

    ``theta`` is (P, M, n, d) and ``d_w_hat`` (P, n, d).  The left side is
    the cross-agent average of the per-agent integrals, the right side the
    integral of the projected strategy.
    """
    theta = np.asarray(theta, dtype=float)
    per_agent = np.einsum("pmnd,pnd->pm", theta, d_w_hat)
    lhs = per_agent.mean(axis=1)
    rhs = np.einsum("pnd,pnd->p", project_pi(theta).values, d_w_hat)
    return lhs, rhs


def energy_surrogate(z, dt: float) -> Estimate:
    """``sup_i E[sum_{s >= i} |z_s|^2 dt]`` with a path-clustered standard error.

    ``z`` is (P, n, d) or (P, M, n, d).  This is an unconditional surrogate
    for the BMO norm; the lattice backend computes the conditional version.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 3:
        z = z[:, None]
    sq = np.sum(z**2, axis=-1) * dt  # (P, M, n)
    tail = np.cumsum(sq[..., ::-1], axis=-1)[..., ::-1]
    means = tail.mean(axis=(0, 1))
    i = int(np.argmax(means))
    return estimate(tail[..., i], axis_clusters=True)
