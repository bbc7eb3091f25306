"""Time grid, random streams and simulation of the driving noises.

The noise of one Monte Carlo world consists of a d-dimensional Brownian
motion (common to every agent), a common part of the jump measure shared
by all agents of a path, and an idiosyncratic part drawn independently for
each agent.  Jump marks live on finitely many atoms ``e_k`` with weights
``lambda_k``; the compensator is ``zeta(t, state, e_k) * lambda_k * dt``.

Randomness is counter based: every draw is a deterministic function of
``(seed, stream, block of paths, cell)``, so results do not depend on the
number of worker threads or on how many paths are requested.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ModelViolationError

BLOCK = 1024

STREAM_BROWNIAN = 1
STREAM_COMMON_JUMPS = 2
STREAM_IDIO_JUMPS = 3
STREAM_EVENT_TIMES = 4
STREAM_TYPES = 5
STREAM_LATTICE = 6

COMMON = "common"
IDIOSYNCRATIC = "idiosyncratic"


# --------------------------------------------------------------------------
# time grid
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def cell_of(self, t):
        """Index of the cell ``[t_i, t_{i+1})`` containing ``t`` (T maps to the last cell)."""
        idx = np.floor(np.asarray(t) / self.dt).astype(int)
        return np.clip(idx, 0, self.n_steps - 1)


def build_time_grid(T: float, n_steps: int) -> TimeGrid:
    if not (isinstance(T, (int, float)) and math.isfinite(T) and T > 0):
        raise ConfigurationError(f"horizon must be positive and finite, got {T!r}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError(f"n_steps must be an integer >= 1, got {n_steps!r}")
    return TimeGrid(float(T), int(n_steps))


# --------------------------------------------------------------------------
# counter-based streams
# --------------------------------------------------------------------------


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the counter ``(seed, *key)``."""
    if seed < 0:
        raise ConfigurationError("seed must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def _blocks(start: int, stop: int):
    first, last = start // BLOCK, (stop - 1) // BLOCK
    return range(first, last + 1)


def _blockwise(draw: Callable[[int], np.ndarray], start: int, stop: int, workers: int = 1) -> np.ndarray:
    """Concatenate ``draw(block)`` over the blocks covering paths ``[start, stop)``.

    Each call returns an array whose first axis has length BLOCK.
    """
    blocks = list(_blocks(start, stop))
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(draw, blocks))
    else:
        parts = [draw(b) for b in blocks]
    out = np.concatenate(parts, axis=0)
    off = start - blocks[0] * BLOCK
    return out[off : off + (stop - start)]


# --------------------------------------------------------------------------
# intensity forms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantIntensity:
    """``zeta(t, state, e_k) = values[k]``."""

    values: tuple

    name = "constant"
    state_free = True

    def __call__(self, t, state=None):
        return np.asarray(self.values, dtype=float)

    @property
    def bound(self) -> float:
        return float(np.max(self.values)) if len(self.values) else 0.0

    @property
    def lower(self) -> float:
        return float(np.min(self.values)) if len(self.values) else 0.0


@dataclass(frozen=True)
class PiecewiseIntensity:
    """Piecewise constant in time: ``values[j]`` on ``[breaks[j-1], breaks[j])``."""

    breaks: tuple
    values: tuple  # one row of per-atom values per piece

    name = "piecewise"
    state_free = True

    def __post_init__(self):
        if len(self.values) != len(self.breaks) + 1:
            raise ConfigurationError("piecewise intensity needs len(values) == len(breaks) + 1")
        if any(b1 >= b2 for b1, b2 in zip(self.breaks, self.breaks[1:])):
            raise ConfigurationError("piecewise intensity breaks must be increasing")

    def __call__(self, t, state=None):
        j = int(np.searchsorted(np.asarray(self.breaks, dtype=float), t, side="right"))
        return np.asarray(self.values[j], dtype=float)

    @property
    def bound(self) -> float:
        return float(np.max(self.values))

    @property
    def lower(self) -> float:
        return float(np.min(self.values))


@dataclass(frozen=True)
class StateScaledIntensity:
    """``base[k] * (1 + scale * tanh(x))`` for a scalar state feature ``x``.

    ``feature`` is one of ``"w"`` (first Brownian coordinate), ``"common_loss"``
    or ``"idio_loss"``.  Only left-endpoint information enters, which keeps the
    intensity predictable.
    """

    base: tuple
    scale: float
    feature: str = "common_loss"

    name = "state_scaled"
    state_free = False

    def __post_init__(self):
        if self.feature not in ("w", "common_loss", "idio_loss"):
            raise ConfigurationError(f"unknown state feature {self.feature!r}")

    def __call__(self, t, state=None):
        base = np.asarray(self.base, dtype=float)
        if state is None:
            return base
        x = state[self.feature]
        if self.feature == "w":
            x = x[..., 0]
        return base * (1.0 + self.scale * np.tanh(np.asarray(x, dtype=float)))[..., None]

    @property
    def bound(self) -> float:
        return float(np.max(self.base)) * (1.0 + abs(self.scale))

    @property
    def lower(self) -> float:
        return float(np.min(self.base)) * (1.0 - abs(self.scale))


INTENSITY_FORMS = {
    "constant": ConstantIntensity,
    "piecewise": PiecewiseIntensity,
    "state_scaled": StateScaledIntensity,
}


# --------------------------------------------------------------------------
# jump specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpSpec:
    """Finite mark measure on atoms plus a bounded intensity density.

    ``marks`` has shape (K, l); ``common[k]`` is True for atoms of the common
    part E_0 and False for the idiosyncratic part E_1.
    """

    marks: np.ndarray
    weights: np.ndarray
    common: np.ndarray
    zeta: object
    c_nu: float

    def __post_init__(self):
        marks = np.atleast_2d(np.asarray(self.marks, dtype=float))
        if marks.size == 0:
            marks = marks.reshape(0, 1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        common = np.asarray(self.common, dtype=bool).reshape(-1)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "common", common)
        for a in (marks, weights, common):
            a.setflags(write=False)
        K = marks.shape[0]
        if weights.shape != (K,) or common.shape != (K,):
            raise ConfigurationError("marks, weights and split labels must have one entry per atom")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ConfigurationError("atom weights must be positive and finite")
        if K and np.any(np.all(marks == 0.0, axis=1)):
            raise ConfigurationError("mark atoms must be nonzero")
        if not (self.c_nu >= 0 and math.isfinite(self.c_nu)):
            raise ConfigurationError("c_nu must be a finite nonnegative bound")
        bound = getattr(self.zeta, "bound", None)
        lower = getattr(self.zeta, "lower", 0.0)
        if bound is not None and bound > self.c_nu + 1e-12:
            raise ConfigurationError(
                f"intensity density reaches {bound:g} > c_nu = {self.c_nu:g}; "
                "the compensator density must satisfy 0 <= zeta <= c_nu"
            )
        if lower is not None and lower < -1e-12:
            raise ConfigurationError("intensity density must be nonnegative (0 <= zeta <= c_nu)")

    @property
    def n_atoms(self) -> int:
        return self.marks.shape[0]

    @property
    def idio(self) -> np.ndarray:
        return ~self.common

    @property
    def loss_sizes(self) -> np.ndarray:
        """Scalar loss carried by each atom (sum of mark coordinates)."""
        return self.marks.sum(axis=1)

    @property
    def state_free(self) -> bool:
        return bool(getattr(self.zeta, "state_free", False))

    def density(self, t, state=None, shape=None) -> np.ndarray:
        """Evaluate zeta and enforce ``0 <= zeta <= c_nu``."""
        z = np.asarray(self.zeta(t, state), dtype=float)
        if shape is not None:
            z = np.broadcast_to(z, shape)
        if z.size and (np.min(z) < -1e-12 or np.max(z) > self.c_nu + 1e-12 or not np.all(np.isfinite(z))):
            raise ModelViolationError(
                f"intensity density outside [0, c_nu={self.c_nu:g}] at t={t:g} "
                f"(range {np.min(z):g}..{np.max(z):g})"
            )
        return z

    def rates(self, t, state=None, shape=None) -> np.ndarray:
        """Compensator rate per atom, ``zeta * lambda``."""
        return self.density(t, state, shape) * self.weights

    def with_zeta(self, zeta, c_nu: float) -> "JumpSpec":
        return JumpSpec(self.marks, self.weights, self.common, zeta, c_nu)


def make_jump_spec(atoms: Sequence[Mapping], zeta=None, c_nu: float | None = None) -> JumpSpec:
    """Build a JumpSpec from ``[{"mark": ..., "weight": ..., "split": "common"|"idiosyncratic"}]``."""
    marks, weights, common = [], [], []
    for a in atoms:
        split = a.get("split", COMMON)
        if split not in (COMMON, IDIOSYNCRATIC):
            raise ConfigurationError(f"atom split must be {COMMON!r} or {IDIOSYNCRATIC!r}, got {split!r}")
        marks.append(np.atleast_1d(np.asarray(a["mark"], dtype=float)))
        weights.append(float(a["weight"]))
        common.append(split == COMMON)
    if marks and len({m.shape for m in marks}) != 1:
        raise ConfigurationError("all marks must have the same dimension")
    K = len(marks)
    if zeta is None:
        zeta = ConstantIntensity(tuple([1.0] * K))
    if c_nu is None:
        c_nu = getattr(zeta, "bound", 1.0)
    marks_arr = np.array(marks) if K else np.zeros((0, 1))
    return JumpSpec(marks_arr, np.array(weights), np.array(common, dtype=bool), zeta, float(c_nu))


def no_jumps() -> JumpSpec:
    return JumpSpec(np.zeros((0, 1)), np.zeros(0), np.zeros(0, dtype=bool), ConstantIntensity(()), 0.0)


def quantile_atoms(ppf: Callable[[np.ndarray], np.ndarray], n_atoms: int, total_weight: float, split=COMMON):
    """Approximate a continuous mark law by ``n_atoms`` mid-quantile atoms of equal weight."""
    u = (np.arange(n_atoms) + 0.5) / n_atoms
    return [{"mark": float(m), "weight": total_weight / n_atoms, "split": split} for m in ppf(u)]


def compensator_integral(spec: JumpSpec, g, t: float, state=None) -> np.ndarray:
    """``sum_k g(e_k) zeta(t, state, e_k) lambda_k``.

    ``g`` is either a callable on the (K, l) mark array or an array of values
    per atom (trailing axis K, broadcast against the state).
    """
    if spec.n_atoms == 0:
        return np.asarray(0.0)
    vals = g(spec.marks) if callable(g) else g
    vals = np.asarray(vals, dtype=float)
    return np.sum(vals * spec.rates(t, state), axis=-1)


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpEvent:
    time: float
    cell: int
    atom_index: int
    owner: object  # COMMON or agent id


EVENT_DTYPE = np.dtype([("path", "i8"), ("agent", "i8"), ("cell", "i8"), ("atom", "i8"), ("time", "f8")])


@dataclass(frozen=True)
class PathBundle:
    """One ensemble of worlds on a shared grid.

    ``dW`` has shape (P, n, d); ``common_counts`` (P, n, K) counts common-atom
    events per cell; ``idio_counts`` (P, M, n, K) counts idiosyncratic events
    per agent and cell.  Columns of atoms with the other split label are zero.
    """

    grid: TimeGrid
    dW: np.ndarray
    common_counts: np.ndarray
    idio_counts: np.ndarray
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=EVENT_DTYPE))
    seed: int = 0
    path_offset: int = 0
    source: str = "continuous"

    def __post_init__(self):
        for name in ("dW", "common_counts", "idio_counts", "events"):
            arr = np.asarray(getattr(self, name))
            if arr is getattr(self, name):
                arr = arr.view()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def n_agents(self) -> int:
        return self.idio_counts.shape[1]

    @property
    def d(self) -> int:
        return self.dW.shape[2]

    @property
    def n_atoms(self) -> int:
        return self.common_counts.shape[2]

    def w_levels(self) -> np.ndarray:
        """Brownian levels at the nodes, shape (P, n+1, d)."""
        P, n, d = self.dW.shape
        out = np.zeros((P, n + 1, d))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def common_levels(self) -> np.ndarray:
        P, n, K = self.common_counts.shape
        out = np.zeros((P, n + 1, K))
        np.cumsum(self.common_counts, axis=1, out=out[:, 1:])
        return out

    def idio_levels(self) -> np.ndarray:
        P, M, n, K = self.idio_counts.shape
        out = np.zeros((P, M, n + 1, K))
        np.cumsum(self.idio_counts, axis=2, out=out[:, :, 1:])
        return out

    def common_jumps(self, path: int) -> list[JumpEvent]:
        return [e for e in self.jump_events(path) if e.owner == COMMON]

    def idio_jumps(self, path: int, agent: int) -> list[JumpEvent]:
        return [e for e in self.jump_events(path) if e.owner == agent]

    def jump_events(self, path: int) -> list[JumpEvent]:
        ev = self.events[self.events["path"] == path]
        return [
            JumpEvent(float(e["time"]), int(e["cell"]), int(e["atom"]), COMMON if e["agent"] < 0 else int(e["agent"]))
            for e in ev
        ]


def make_state(grid: TimeGrid, cell: int, w, common_counts, idio_counts, loss_sizes, extra=None) -> dict:
    """Left-endpoint state dictionary handed to intensities and regressions.

    Shapes: ``w`` (P, 1, d), ``common_counts`` (P, 1, K), ``idio_counts`` (P, M, K).
    """
    state = {
        "cell": cell,
        "t": cell * grid.dt,
        "w": w,
        "common_counts": common_counts,
        "idio_counts": idio_counts,
        "common_loss": common_counts @ loss_sizes,
        "idio_loss": idio_counts @ loss_sizes,
    }
    if extra:
        state.update(extra)
    return state


def bundle_state(bundle: PathBundle, cell: int, loss_sizes, extra=None) -> dict:
    w = bundle.w_levels()[:, cell][:, None, :]
    cc = bundle.common_counts[:, :cell].sum(axis=1)[:, None, :]
    ic = bundle.idio_counts[:, :, :cell].sum(axis=2)
    return make_state(bundle.grid, cell, w, cc, ic, loss_sizes, extra)


def simulate_brownian(grid: TimeGrid, d: int, n_paths: int, seed: int, path_offset: int = 0, workers: int = 1) -> np.ndarray:
    """Brownian increments of shape (n_paths, n_steps, d), variance dt per coordinate."""
    if d < 1 or n_paths < 1:
        raise ConfigurationError("need d >= 1 and n_paths >= 1")
    n, sq = grid.n_steps, math.sqrt(grid.dt)

    def draw(block):
        return stream(seed, STREAM_BROWNIAN, block).standard_normal((BLOCK, n, d)) * sq

    return _blockwise(draw, path_offset, path_offset + n_paths, workers)


@dataclass(frozen=True)
class JumpSample:
    common_counts: np.ndarray
    idio_counts: np.ndarray
    events: np.ndarray


def simulate_jump_measure(
    grid: TimeGrid,
    spec: JumpSpec,
    n_agents: int,
    n_paths: int,
    seed: int,
    *,
    brownian: np.ndarray | None = None,
    extra_state: Mapping | None = None,
    path_offset: int = 0,
    workers: int = 1,
    idio_seed: int | None = None,
) -> JumpSample:
    """Simulate common and idiosyncratic jump counts by thinning.

    Per cell and atom, candidate events arrive at rate ``c_nu * lambda_k``
    and are kept with probability ``zeta / c_nu`` evaluated at the cell's left
    endpoint.  Common atoms use one stream per path; idiosyncratic atoms one
    stream per agent.  ``idio_seed`` (default ``seed``) keys the idiosyncratic
    streams separately, which gives fresh agent copies on the same common paths.
    """
    if n_agents < 1 or n_paths < 1:
        raise ConfigurationError("need n_agents >= 1 and n_paths >= 1")
    P, M, n, K = n_paths, n_agents, grid.n_steps, spec.n_atoms
    dt = grid.dt
    common_counts = np.zeros((P, n, K), dtype=np.int64)
    idio_counts = np.zeros((P, M, n, K), dtype=np.int64)
    if K == 0 or spec.c_nu == 0:
        return JumpSample(common_counts, idio_counts, np.zeros(0, dtype=EVENT_DTYPE))

    lo, hi = path_offset, path_offset + P
    iseed = seed if idio_seed is None else idio_seed
    d = brownian.shape[2] if brownian is not None else 1
    w_levels = np.zeros((P, n + 1, d))
    if brownian is not None:
        np.cumsum(brownian, axis=1, out=w_levels[:, 1:])
    cmask, imask = spec.common, spec.idio
    prop_rate = spec.c_nu * spec.weights * dt
    loss = spec.loss_sizes

    run_c = np.zeros((P, 1, K))
    run_i = np.zeros((P, M, K))
    for i in range(n):
        state = make_state(grid, i, w_levels[:, i][:, None, :], run_c, run_i, loss, extra_state)
        z = spec.density(i * dt, state, (P, M, K))
        zc = z[:, 0, :]
        if cmask.any() and M > 1 and not np.allclose(z[:, :, cmask], zc[:, None, cmask]):
            raise ModelViolationError("intensity of a common atom must not depend on idiosyncratic state")
        accept = np.clip(z / spec.c_nu, 0.0, 1.0)

        def draw_common(block, i=i):
            rng = stream(seed, STREAM_COMMON_JUMPS, block, i)
            return rng.poisson(prop_rate, size=(BLOCK, K))

        def draw_idio(block, i=i):
            rng = stream(iseed, STREAM_IDIO_JUMPS, block, i)
            return rng.poisson(prop_rate, size=(BLOCK, M, K))

        def draw_thin(block, i=i):
            return stream(seed, STREAM_COMMON_JUMPS, block, i, 1).random((BLOCK, K))

        def draw_thin_idio(block, i=i):
            return stream(iseed, STREAM_IDIO_JUMPS, block, i, 1).random((BLOCK, M, K))

        # candidate counts; thinning keeps each candidate independently
        pc = _blockwise(draw_common, lo, hi, workers)
        pi = _blockwise(draw_idio, lo, hi, workers)
        if cmask.any():
            kc = _thin(pc, accept[:, 0, :], _blockwise(draw_thin, lo, hi, workers))
            common_counts[:, i, :] = np.where(cmask, kc, 0)
        if imask.any():
            ki = _thin(pi, accept, _blockwise(draw_thin_idio, lo, hi, workers))
            idio_counts[:, :, i, :] = np.where(imask, ki, 0)
        run_c = run_c + common_counts[:, i, :][:, None, :]
        run_i = run_i + idio_counts[:, :, i, :]

    events = _event_table(grid, common_counts, idio_counts, seed, lo, workers)
    return JumpSample(common_counts, idio_counts, events)


def _thin(candidates: np.ndarray, accept: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Number of kept candidates given per-cell acceptance probability.

    A binomial(candidates, accept) draw obtained by inversion from the uniform
    ``u``, so every cell consumes exactly one uniform.
    """
    out = np.zeros_like(candidates)
    todo = candidates > 0
    if not todo.any():
        return out
    c = candidates[todo]
    p = np.broadcast_to(accept, candidates.shape)[todo]
    uu = u[todo]
    # inversion of the binomial cdf; candidate counts per cell are small
    full = p >= 1.0
    q = np.where(full, 0.5, p)
    k = np.zeros_like(c)
    pmf = (1.0 - q) ** c
    cdf = pmf.copy()
    ratio = q / (1.0 - q)
    while True:
        more = (uu > cdf) & (k < c)
        if not more.any():
            break
        pmf = np.where(more, pmf * (c - k) / (k + 1) * ratio, pmf)
        k = np.where(more, k + 1, k)
        cdf = np.where(more, cdf + pmf, cdf)
    k = np.where(full, c, k)
    out[todo] = k
    return out


def _event_table(grid, common_counts, idio_counts, seed, offset, workers) -> np.ndarray:
    """Event records with times uniform inside their cell."""
    P, n, K = common_counts.shape
    rows = []
    cp, ci, ck = np.nonzero(common_counts)
    for p, i, k in zip(cp, ci, ck):
        for _ in range(common_counts[p, i, k]):
            rows.append((p, -1, i, k))
    ip, ia, ii, ik = np.nonzero(idio_counts)
    for p, a, i, k in zip(ip, ia, ii, ik):
        for _ in range(idio_counts[p, a, i, k]):
            rows.append((p, a, i, k))
    ev = np.zeros(len(rows), dtype=EVENT_DTYPE)
    if not rows:
        return ev
    arr = np.array(rows, dtype=np.int64)
    order = np.lexsort((arr[:, 3], arr[:, 1], arr[:, 2], arr[:, 0]))
    arr = arr[order]
    ev["path"], ev["agent"], ev["cell"], ev["atom"] = arr.T
    # one uniform per event from a per-path stream: deterministic given counts
    u = np.empty(len(arr))
    starts = np.searchsorted(arr[:, 0], np.arange(P + 1))
    for p in range(P):
        a, b = starts[p], starts[p + 1]
        if b > a:
            u[a:b] = stream(seed, STREAM_EVENT_TIMES, offset + p).random(b - a)
    ev["time"] = (ev["cell"] + u) * grid.dt
    return ev


def simulate_bundle(
    grid: TimeGrid,
    spec: JumpSpec,
    d: int,
    n_paths: int,
    n_agents: int,
    seed: int,
    *,
    extra_state: Mapping | None = None,
    path_offset: int = 0,
    workers: int = 1,
    with_events: bool = True,
    idio_seed: int | None = None,
) -> PathBundle:
    dW = simulate_brownian(grid, d, n_paths, seed, path_offset, workers)
    js = simulate_jump_measure(
        grid, spec, n_agents, n_paths, seed, brownian=dW, extra_state=extra_state,
        path_offset=path_offset, workers=workers, idio_seed=idio_seed,
    )
    events = js.events if with_events else np.zeros(0, dtype=EVENT_DTYPE)
    return PathBundle(grid, dW, js.common_counts, js.idio_counts, events, seed, path_offset)
