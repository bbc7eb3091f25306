"""Recombining Markov lattice for one risky asset and finitely many jump atoms.

Each grid cell is split into two substeps.  The common substep moves the
Brownian coordinate by ``+s`` or ``-s`` or fires exactly one common atom;
the idiosyncratic substep fires at most one idiosyncratic atom.  Every
substep has as many outcomes as martingale directions plus one, so each
one-step martingale representation is exact.

A node state is ``(j, c_1, ..., c_K)`` with ``j`` = ups minus downs and
``c_k`` the running count of atom ``k``; arrays over states are dense with
shape ``(2n+1, n+1, ..., n+1)`` and axis 0 offset by ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import (
    STREAM_LATTICE,
    ConstantIntensity,
    JumpSpec,
    PathBundle,
    TimeGrid,
    _blockwise,
    stream,
    BLOCK,
)
from .errors import ConfigurationError
from .market import MarketSpec


def shift(a: np.ndarray, axis: int, step: int, fill: str = "edge") -> np.ndarray:
    """``out[x] = a[x + step]`` along ``axis`` (``step`` is +1 or -1).

    ``fill="edge"`` repeats the boundary (value arrays), ``fill="zero"`` pads
    with zeros (probability mass).
    """
    out = np.empty_like(a) if fill == "edge" else np.zeros_like(a)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step == 1:
        src[axis], dst[axis] = slice(1, None), slice(None, -1)
        edge_dst, edge_src = -1, -1
    else:
        src[axis], dst[axis] = slice(None, -1), slice(1, None)
        edge_dst, edge_src = 0, 0
    out[tuple(dst)] = a[tuple(src)]
    if fill == "edge":
        e_d = [slice(None)] * a.ndim
        e_d[axis] = edge_dst
        e_s = [slice(None)] * a.ndim
        e_s[axis] = edge_src
        out[tuple(e_d)] = a[tuple(e_s)]
    return out


@dataclass(frozen=True)
class LatticeModel:
    grid: TimeGrid
    phi: np.ndarray  # (n,) left-endpoint market price of risk per cell
    probs: np.ndarray  # (K,) per-cell event probability zeta * lambda * dt
    common: np.ndarray  # (K,) bool
    loss_sizes: np.ndarray  # (K,)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def n_atoms(self) -> int:
        return self.probs.shape[0]

    @property
    def shape(self) -> tuple:
        n = self.n_steps
        return (2 * n + 1,) + (n + 1,) * self.n_atoms

    @property
    def p_common(self) -> float:
        return float(self.probs[self.common].sum())

    @property
    def p_idio(self) -> float:
        return float(self.probs[~self.common].sum())

    @property
    def step(self) -> float:
        """Brownian move size ``s`` with ``(1 - P_common) s^2 = dt``."""
        return math.sqrt(self.grid.dt / (1.0 - self.p_common))

    def count_axis(self, k: int) -> int:
        return 1 + k

    def features(self) -> dict:
        """Dense state features: Brownian level, per-atom counts and loss totals."""
        n, K = self.n_steps, self.n_atoms
        idx = np.indices(self.shape, sparse=True)
        w = (idx[0] - n) * self.step
        counts = [idx[1 + k] for k in range(K)]
        shape = self.shape
        cl = np.zeros(shape)
        il = np.zeros(shape)
        for k in range(K):
            if self.common[k]:
                cl = cl + counts[k] * self.loss_sizes[k]
            else:
                il = il + counts[k] * self.loss_sizes[k]
        return {
            "w": np.broadcast_to(w, shape),
            "counts": [np.broadcast_to(c, shape) for c in counts],
            "common_loss": cl,
            "idio_loss": il,
        }

    def origin(self) -> tuple:
        return (self.n_steps,) + (0,) * self.n_atoms

    # ---------------------------------------------------------------- forward

    def forward_common(self, dist: np.ndarray) -> np.ndarray:
        """Push a distribution over node states through the common substep."""
        pc = self.p_common
        out = 0.5 * (1.0 - pc) * (shift(dist, 0, -1, "zero") + shift(dist, 0, 1, "zero"))
        for k in np.flatnonzero(self.common):
            out = out + self.probs[k] * shift(dist, self.count_axis(k), -1, "zero")
        return out

    def forward_idio(self, dist: np.ndarray) -> np.ndarray:
        out = (1.0 - self.p_idio) * dist
        for k in np.flatnonzero(~self.common):
            out = out + self.probs[k] * shift(dist, self.count_axis(k), -1, "zero")
        return out

    def distributions(self) -> np.ndarray:
        """State distribution at every node, shape (n+1, *shape)."""
        out = np.zeros((self.n_steps + 1,) + self.shape)
        out[0][self.origin()] = 1.0
        for i in range(self.n_steps):
            out[i + 1] = self.forward_idio(self.forward_common(out[i]))
        return out

    def reachable(self) -> np.ndarray:
        return self.distributions() > 0

    def idio_axes(self) -> tuple:
        return tuple(self.count_axis(k) for k in np.flatnonzero(~self.common))

    def idio_marginals(self) -> np.ndarray:
        """Distribution of idiosyncratic counts per node, summed over common axes (keepdims)."""
        dist = self.distributions()
        common_axes = (1,) + tuple(1 + self.count_axis(k) for k in np.flatnonzero(self.common))
        return dist.sum(axis=common_axes, keepdims=True)

    def sample_paths(
        self, n_paths: int, n_agents: int, seed: int, path_offset: int = 0, workers: int = 1,
        idio_seed: int | None = None,
    ) -> PathBundle:
        """Sample common paths and per-agent idiosyncratic paths from the lattice law.

        ``idio_seed`` (default ``seed``) keys the idiosyncratic draws alone.
        """
        n, K = self.n_steps, self.n_atoms
        cidx = np.flatnonzero(self.common)
        iidx = np.flatnonzero(~self.common)
        pc = self.p_common
        c_probs = np.concatenate([[(1 - pc) / 2, (1 - pc) / 2], self.probs[cidx]])
        i_probs = np.concatenate([[1 - self.p_idio], self.probs[iidx]])
        c_cdf, i_cdf = np.cumsum(c_probs), np.cumsum(i_probs)
        iseed = seed if idio_seed is None else idio_seed

        def draw_c(block):
            return stream(seed, STREAM_LATTICE, block, 0).random((BLOCK, n))

        def draw_i(block):
            return stream(iseed, STREAM_LATTICE, block, 1).random((BLOCK, n_agents, n))

        lo, hi = path_offset, path_offset + n_paths
        oc = np.minimum(np.searchsorted(c_cdf, _blockwise(draw_c, lo, hi, workers), side="right"), len(c_cdf) - 1)
        oi = np.minimum(np.searchsorted(i_cdf, _blockwise(draw_i, lo, hi, workers), side="right"), len(i_cdf) - 1)
        s = self.step
        dW = np.where(oc == 0, s, np.where(oc == 1, -s, 0.0))[..., None]
        cc = np.zeros((n_paths, n, K), dtype=np.int64)
        for pos, k in enumerate(cidx):
            cc[..., k] = oc == 2 + pos
        ic = np.zeros((n_paths, n_agents, n, K), dtype=np.int64)
        for pos, k in enumerate(iidx):
            ic[..., k] = oi == 1 + pos
        return PathBundle(self.grid, dW, cc, ic, seed=seed, path_offset=path_offset, source="lattice")

    def path_indices(self, bundle: PathBundle, agent: int = 0):
        """Node-state and mid-state index tuples for every (path, cell).

        Returns ``(node, mid, terminal)``: ``node`` and ``mid`` are tuples of
        (P, n) integer arrays, ``terminal`` a tuple of (P,) arrays.
        """
        n, K = self.n_steps, self.n_atoms
        moves = np.sign(bundle.dW[..., 0]).astype(np.int64)
        j = np.zeros((bundle.n_paths, n + 1), dtype=np.int64)
        np.cumsum(moves, axis=1, out=j[:, 1:])
        cnt = bundle.common_counts + bundle.idio_counts[:, agent]
        lev = np.zeros((bundle.n_paths, n + 1, K), dtype=np.int64)
        np.cumsum(cnt, axis=1, out=lev[:, 1:])
        node = (j[:, :-1] + n,) + tuple(lev[:, :-1, k] for k in range(K))
        mid_counts = lev[:, :-1] + bundle.common_counts
        mid = (j[:, 1:] + n,) + tuple(mid_counts[..., k] for k in range(K))
        term = (j[:, -1] + n,) + tuple(lev[:, -1, k] for k in range(K))
        return node, mid, term


def build_lattice(grid: TimeGrid, market: MarketSpec, spec: JumpSpec) -> LatticeModel:
    """Lattice for one risky asset, deterministic phi and constant intensity."""
    if market.d != 1:
        raise ConfigurationError("the lattice backend supports one risky asset (d = 1); use lsmc")
    if not market.deterministic_phi:
        raise ConfigurationError("the lattice backend needs a deterministic market price of risk; use lsmc")
    if spec.n_atoms and not isinstance(spec.zeta, ConstantIntensity):
        raise ConfigurationError("the lattice backend needs a constant intensity density; use lsmc")
    if spec.n_atoms > 3:
        raise ConfigurationError("the lattice backend supports at most three jump atoms")
    phi = np.array([float(np.asarray(market.phi_at(t)).reshape(-1)[0]) for t in grid.nodes[:-1]])
    probs = spec.rates(0.0) * grid.dt if spec.n_atoms else np.zeros(0)
    model = LatticeModel(grid, phi, np.asarray(probs, dtype=float), spec.common.copy(), spec.loss_sizes.copy())
    if model.p_common >= 1.0 or model.p_idio > 1.0:
        raise ConfigurationError(
            "jump probabilities per cell are too large for the lattice; increase n_steps "
            f"(common {model.p_common:.3g}, idiosyncratic {model.p_idio:.3g})"
        )
    return model


def lattice_pi(model: LatticeModel, marginals: np.ndarray, i: int, values: np.ndarray) -> np.ndarray:
    """Exact common-noise projection at node ``i``.

    Averages ``values`` (dense over node states) over the idiosyncratic count
    distribution, which is independent of the common noise; the result is
    broadcast back over the idiosyncratic axes.
    """
    axes = model.idio_axes()
    if not axes:
        return np.array(values, dtype=float, copy=True)
    w = marginals[i]
    num = np.sum(w * values, axis=axes, keepdims=True)
    den = np.sum(w, axis=axes, keepdims=True)
    return np.broadcast_to(num / den, model.shape).copy()


def agent_indices(model: LatticeModel, bundle: PathBundle):
    """Node-state index tuples for every (path, agent, cell) and at the terminal node.

    Returns ``(node, terminal)`` with arrays of shape (P, M, n) and (P, M).
    """
    n, K = model.n_steps, model.n_atoms
    P, M = bundle.n_paths, bundle.n_agents
    moves = np.sign(bundle.dW[..., 0]).astype(np.int64)
    j = np.zeros((P, n + 1), dtype=np.int64)
    np.cumsum(moves, axis=1, out=j[:, 1:])
    cl = np.zeros((P, n + 1, K), dtype=np.int64)
    np.cumsum(bundle.common_counts, axis=1, out=cl[:, 1:])
    il = np.zeros((P, M, n + 1, K), dtype=np.int64)
    np.cumsum(bundle.idio_counts, axis=2, out=il[:, :, 1:])
    lev = cl[:, None] + il  # (P, M, n+1, K)
    jj = np.broadcast_to(j[:, None, :] + n, (P, M, n + 1))
    node = (jj[..., :-1],) + tuple(lev[..., :-1, k] for k in range(K))
    term = (jj[..., -1],) + tuple(lev[..., -1, k] for k in range(K))
    return node, term
